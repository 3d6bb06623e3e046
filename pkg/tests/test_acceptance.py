"""Acceptance gate: one PASS/FAIL line per criterion, printed to the terminal."""

import time
from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from tokenbudget import acm, checks, cli, flops
from tokenbudget import driving as dr
from tokenbudget import numerics as nx
from tokenbudget import predictor as pred
from tokenbudget import teacher as tch
from tokenbudget.config import FULL_SCALE, RunConfig
from tokenbudget.numerics import RngState, Var


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def test_c1_token_budget(verdict):
    f32 = np.float32
    T, N, D, K = FULL_SCALE.T, FULL_SCALE.N, FULL_SCALE.D, FULL_SCALE.K
    spec = pred.WindowSpec(FULL_SCALE.ell, FULL_SCALE.kappa)
    rng = RngState(0)
    params = {k: v.astype(f32) for k, v in pred.init_params(T, N, D, spec, FULL_SCALE.L, rng.derive("p")).items()}
    acm_params = {k: v.astype(f32) for k, v in acm.init_params(D, FULL_SCALE.D_head, rng.derive("a")).items()}
    teacher = tch.ToyDecoder(D, seed=0).astype(f32)
    text = np.zeros((FULL_SCALE.n_text, teacher.width), f32)
    stack = dr.synthesize_scene(0, dr.SceneConfig(T, N, D)).tokens.astype(f32)

    def reduced_path():
        scores = pred.predict_importance(stack, params, spec)
        return scores, acm.reduce_stack(stack, scores, acm_params, K)

    def all_token_path():
        return tch.auxiliary_pass(stack, text, teacher)

    reduced_path(), all_token_path()   # warm caches and BLAS threads
    t_red, t_all = [], []
    for _ in range(3):
        t0 = time.perf_counter()
        scores, out = reduced_path()
        t1 = time.perf_counter()
        aux = all_token_path()
        t_all.append(time.perf_counter() - t1)
        t_red.append(t1 - t0)
    n_reduced, n_all = out.tokens.shape[0], aux.scores.shape[0]
    ok = (n_reduced == 120 and n_all == 3000 and scores.shape == (3000,)
          and min(t_red) < 1.0 and min(t_all) < 1.0)
    verdict(1, ok, f"reduced_tokens={n_reduced} all_tokens={n_all} "
                   f"reduced_path={min(t_red):.3f}s all_token_path={min(t_all):.3f}s (best of 3, float32)")


def test_c2_mixing_ratio(verdict):
    t0 = time.perf_counter()
    e = flops.closed_form(30, 100, 256, 1, 2, flops.EXISTING)
    p = flops.closed_form(30, 100, 256, 1, 2, flops.PROPOSED)
    factors = {}
    for n in (20, 50, 100):
        for variant in (flops.EXISTING, flops.PROPOSED):
            census = flops.empirical_count(30, n, 256, 1, 2, variant, strided_tau=True)
            factors.setdefault(variant, set()).add(Fraction(census) / flops.closed_form(30, n, 256, 1, 2, variant))
    elapsed = time.perf_counter() - t0
    constant = all(len(v) == 1 for v in factors.values())
    fp = next(iter(factors[flops.PROPOSED]))
    fe = next(iter(factors[flops.EXISTING]))
    ok = e / p == Fraction(20, 3) and constant and 1 <= fp <= 8 and elapsed < 10
    verdict(2, ok, f"closed_form_ratio={e / p} census/closed existing={fe} proposed={fp} "
                   f"constant_over_N={constant} runtime={elapsed:.2f}s")


def test_c3_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    failed = []
    for scope in checks.SCOPES:
        results = checks.run_checks(scope)
        worst[scope] = max(r.error for r in results)
        failed += [f"{scope}.{r.name}" for r in results if not r.ok]
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 120
    detail = " ".join(f"{s}={worst[s]:.1e}<{checks.TOLERANCE[s]:.0e}" for s in checks.SCOPES)
    verdict(3, ok, f"{detail} failed={failed or 'none'} runtime={elapsed:.1f}s")


def test_c4_assignment_invariants(verdict):
    rng = RngState(2024)
    gen = rng.generator
    worst_sum = 0.0
    bad = {"one_hot": 0, "residual": 0, "ste": 0}
    empty_rows = 0
    for _ in range(10_000):
        N = int(gen.integers(2, 12))
        K = int(gen.integers(1, N))
        D = int(gen.integers(2, 9))
        dh = int(gen.integers(1, 6))
        tokens = rng.normal(size=(N, D))
        part = acm.partition_topk(tokens, rng.normal(size=N), K)
        params = acm.init_params(D, dh, rng)
        temp = float(gen.uniform(0.1, 2.0))
        noise = RngState(int(gen.integers(0, 2**62)))
        q, k, v = acm.project_qkv(part, params)
        soft = acm.assign(q, k, temp, noise).value
        worst_sum = max(worst_sum, float(np.abs(soft.sum(axis=0) - 1).max()))
        hard = nx.ste_harden(soft, axis=-2).value
        if not (set(np.unique(hard)) <= {0.0, 1.0} and np.all(hard.sum(axis=0) == 1)):
            bad["one_hot"] += 1
        merged = acm.merge(part, hard, v, params["W_O"]).value
        empty = hard.sum(axis=1) == 0
        empty_rows += int(empty.sum())
        if not np.array_equal(merged[empty], part.anchors.value[empty]):
            bad["residual"] += 1
        # scalar readout through the hard path vs the soft path
        probe = rng.normal(size=(K, D))
        grads = []
        for harden in (True, False):
            qv, kv = Var(q.value, requires_grad=True), Var(k.value, requires_grad=True)
            s = acm.assign(qv, kv, temp, RngState(noise.seed, 0))
            m = nx.ste_harden(s, axis=-2) if harden else s
            nx.sum_(acm.merge(part, m, v.value, params["W_O"]) * probe).backward()
            grads.append((qv.grad, kv.grad))
        if not all(np.array_equal(a, b) for a, b in zip(*grads)):
            bad["ste"] += 1
    ok = worst_sum < 1e-12 and not any(bad.values())
    verdict(4, ok, f"instances=10000 max_col_sum_err={worst_sum:.1e} violations={bad} "
                   f"empty_anchor_rows_checked={empty_rows}")


def test_c5_pseudo_signal_invariants(verdict):
    rng = RngState(7)
    gen = rng.generator
    teacher = tch.ToyDecoder(16, seed=3, focus=rng.normal(size=16))
    worst_row = worst_col = 0.0
    for _ in range(1000):
        n_vis, n_text = int(gen.integers(1, 40)), int(gen.integers(0, 8))
        vis = teacher.project_visual(rng.normal(size=(n_vis, 16))).value
        seq = tch.TokenSequence(vis, rng.normal(size=(n_text, teacher.width)), 1)
        _, attn = tch.decode(seq, teacher, capture_attention=True)
        worst_row = max(worst_row, float(np.abs(attn.sum(axis=-1) - 1).max()))
        sig = tch.pseudo_scores(attn, seq.visual_positions())
        worst_col = max(worst_col, abs(float(sig.full_column_means.sum()) - 1))

    cfg = RunConfig(n_scenes=100, epochs=1)
    model = cli.build(cfg)
    before = model.teacher.checksum()
    dr.train(model, cli.get_scenes(cfg), cli.train_config(cfg))
    same = model.teacher.checksum() == before
    ok = worst_row < 1e-12 and worst_col < 1e-9 and same
    verdict(5, ok, f"passes=1000 max_row_err={worst_row:.1e} max_colmean_sum_err={worst_col:.1e} "
                   f"checksum_unchanged_after_100_steps={same}")


def test_c6_window_oracle(verdict):
    mismatches = cases = 0
    for T, ell in product(range(1, 13), range(1, 4)):
        for kappa in range(1, ell + 2):
            spec = pred.WindowSpec(ell, kappa)
            for tau in range(T):
                oracle = tuple(min(max(tau + i * kappa, 0), T - 1) for i in range(-ell, ell + 1))
                cases += 1
                mismatches += pred.window_indices(tau, T, spec) != oracle
    rng = RngState(6)
    gen = rng.generator
    gather_bad = 0
    for _ in range(100):
        T, N, D = (int(v) for v in gen.integers(1, 9, size=3))
        ell = int(gen.integers(1, 4))
        spec = pred.WindowSpec(ell, int(gen.integers(1, ell + 2)))
        stack = rng.normal(size=(T, N, D))
        tau = int(gen.integers(0, T))
        rows = [stack[j] for j in pred.window_indices(tau, T, spec)]
        gather_bad += not np.array_equal(pred.gather_window(stack, tau, spec).value, np.concatenate(rows))
    ok = mismatches == 0 and gather_bad == 0
    verdict(6, ok, f"window_cases={cases} mismatches={mismatches} gather_stacks=100 gather_mismatches={gather_bad}")


@pytest.mark.slow
def test_c7_training_smoke(verdict):
    cfg = RunConfig()
    t0 = time.perf_counter()
    scenes = cli.get_scenes(cfg)
    runs = []
    for _ in range(2):
        model = cli.build(cfg)
        result = dr.train(model, scenes, cli.train_config(cfg))
        runs.append((model, [(r.wp, r.score, r.total) for r in result.curve]))
    elapsed = time.perf_counter() - t0
    model, curve = runs[0]
    identical = curve == runs[1][1] and all(
        np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in model.params)
    drop = 1 - curve[-1][2] / curve[0][2]
    stats = dr.evaluate(model, scenes[:20], cfg.lam)
    ok = drop >= 0.5 and stats["salient_mean"] > stats["noise_mean"] and identical and elapsed < 600
    verdict(7, ok, f"total {curve[0][2]:.3f}->{curve[-1][2]:.3f} drop={drop:.1%} "
                   f"salient_mean={stats['salient_mean']:.4f} noise_mean={stats['noise_mean']:.4f} "
                   f"bit_identical={identical} runtime={elapsed:.0f}s (two runs)")


def test_c8_ablation_directions(verdict):
    on = flops.empirical_count(30, 100, 256, 1, 2, flops.PROPOSED, strided_tau=False)
    on_strided = flops.empirical_count(30, 100, 256, 1, 2, flops.PROPOSED, strided_tau=True)
    off = flops.empirical_count(30, 100, 256, 1, 2, flops.EXISTING)

    cfg = RunConfig(n_scenes=8, epochs=1)
    scenes = cli.get_scenes(cfg)
    outputs, finals = {}, {}
    for mode in acm.MERGE_MODES:
        model = cli.build(cfg, merge_mode=mode)
        finals[mode] = dr.train(model, scenes, cli.train_config(cfg)).curve[-1].total
        _, wp, reduced = dr.main_path(model, scenes[0].tokens, model.params)
        outputs[mode] = reduced.tokens.value
    finite = all(np.all(np.isfinite(v)) for v in outputs.values())
    modes = list(outputs)
    distinct = all(not np.array_equal(outputs[a], outputs[b])
                   for i, a in enumerate(modes) for b in modes[i + 1:])
    ok = on < off and on_strided < off and finite and distinct
    verdict(8, ok, f"window_on={on} window_on_strided={on_strided} window_off={off} "
                   f"modes_distinct={distinct} final_total="
                   + ",".join(f"{m}:{finals[m]:.3f}" for m in modes))


def test_c9_decoder_cost(verdict):
    r = flops.headline_ratio(3000, 120)
    ok = r["census_reduced"] < r["census_all"] and r["linear_bound"] <= r["ratio"] <= r["quadratic_bound"]
    verdict(9, ok, f"census_3000={r['census_all']} census_120={r['census_reduced']} ratio={r['ratio']:.1f} "
                   f"bounds=[{r['linear_bound']:.0f}, {r['quadratic_bound']:.0f}]")
