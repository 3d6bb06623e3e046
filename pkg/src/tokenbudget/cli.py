"""Command-line entry point: train, ablate, check, flops, synth.

Exit codes: 0 success, 1 check failure, 2 usage or config error. Errors are
printed as a single ``error=<code> detail=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import acm, checks, flops, plotting
from . import driving as dr
from . import numerics as nx
from . import predictor as pred
from .config import ConfigError, RunConfig, dump_config, load_config
from .numerics import RngState
from .tensorio import save_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

ABLATION_MODES = acm.MERGE_MODES + pred.PREDICTOR_MODES


class CliError(Exception):
    def __init__(self, code, detail, status=EXIT_USAGE):
        super().__init__(detail)
        self.code = code
        self.detail = detail
        self.status = status


def _load(path):
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise CliError("config_not_found", str(p))
    try:
        return load_config(p)
    except (ConfigError, ValueError) as exc:
        raise CliError("bad_config", str(exc)) from exc


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def scene_config(cfg):
    return dr.SceneConfig(T=cfg.T, N=cfg.N, D=cfg.D, T_plus=cfg.T_plus,
                          salient_per_frame=cfg.salient_per_frame)


def scene_seeds(cfg):
    rng = RngState(cfg.data_seed).derive("scenes")
    return [int(s) for s in rng.generator.integers(0, 2**62, size=cfg.n_scenes)]


def get_scenes(cfg):
    if cfg.dataset_path:
        path = Path(cfg.dataset_path)
        if not path.is_dir():
            raise CliError("dataset_not_found", str(path))
        scenes = dr.load_dataset(path)
        if not scenes:
            raise CliError("dataset_empty", str(path))
        t, n, d = scenes[0].tokens.shape
        if (t, n, d) != (cfg.T, cfg.N, cfg.D):
            raise CliError("bad_config", f"dataset shape {(t, n, d)} != config {(cfg.T, cfg.N, cfg.D)}")
        return scenes
    sc = scene_config(cfg)
    return [dr.synthesize_scene(s, sc, data_seed=cfg.data_seed) for s in scene_seeds(cfg)]


def build(cfg, merge_mode=None, predictor_mode=None):
    return dr.build_model(
        cfg.T, cfg.N, cfg.D, T_plus=cfg.T_plus, ell=cfg.ell, kappa=cfg.kappa, L=cfg.L, K=cfg.K,
        D_head=cfg.D_head, teacher_width=cfg.teacher_width, teacher_depth=cfg.teacher_depth,
        teacher_heads=cfg.teacher_heads, n_text=cfg.n_text, init_seed=cfg.init_seed,
        teacher_seed=cfg.teacher_seed, data_seed=cfg.data_seed, focus_gain=cfg.focus_gain,
        merge_mode=merge_mode or cfg.merge_mode,
        predictor_mode=predictor_mode or cfg.predictor_mode, strided_tau=cfg.strided_tau)


def train_config(cfg):
    return dr.TrainConfig(epochs=cfg.epochs, lr=cfg.lr, clip_norm=cfg.clip_norm, lam=cfg.lam,
                          temp_start=cfg.temp_start, temp_end=cfg.temp_end,
                          gumbel_seed=cfg.gumbel_seed, shuffle_seed=cfg.init_seed)


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wp", "score", "total"])
        for i, row in enumerate(curve, 1):
            w.writerow([i, repr(float(row.wp)), repr(float(row.score)), repr(float(row.total))])


def predictor_census(model, tokens):
    with nx.count_ops() as counter:
        dr.scores_for(model, tokens)
    return counter.total


# ---- commands

def cmd_train(args):
    cfg = _load(args.config)
    scenes = get_scenes(cfg)
    out = _outdir(args.out)
    (out / "config.resolved").write_text(dump_config(cfg))
    model = build(cfg)
    result = dr.train(model, scenes, train_config(cfg),
                      log=lambda e, r: print(f"epoch={e + 1} wp={r.wp:.6f} score={r.score:.6f} total={r.total:.6f}"))
    write_loss_csv(out / "loss.csv", result.curve)
    plotting.plot_loss_curve([(i, r.wp, r.score, r.total) for i, r in enumerate(result.curve, 1)],
                             out / "loss.png")
    save_checkpoint(out / cfg.checkpoint_dir, model.params)
    reduced = acm.reduce_stack(scenes[0].tokens, dr.scores_for(model, scenes[0].tokens),
                               dr.subparams(model.params, "acm."), cfg.K, cfg.temp_end, None,
                               mode=model.merge_mode)
    acm.write_trace(out / "merge_trace.jsonl", reduced)
    summary = dr.evaluate(model, scenes[: min(len(scenes), 20)], cfg.lam)
    summary["teacher_checksum"] = model.teacher.checksum()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def run_ablation(cfg, modes):
    scenes = get_scenes(cfg)
    rows = []
    for mode in modes:
        if mode in acm.MERGE_MODES:
            model = build(cfg, merge_mode=mode)
        else:
            model = build(cfg, predictor_mode=mode)
        result = dr.train(model, scenes, train_config(cfg))
        last = result.curve[-1]
        rows.append({
            "mode": mode,
            "merge_mode": model.merge_mode,
            "predictor_mode": model.predictor_mode,
            "wp": float(last.wp),
            "score": float(last.score),
            "total": float(last.total),
            "predictor_ops": predictor_census(model, scenes[0].tokens),
        })
    return rows


def cmd_ablate(args):
    modes = [m.strip() for m in (args.modes or "").split(",") if m.strip()]
    if not modes:
        raise CliError("empty_modes", "no ablation modes given")
    unknown = [m for m in modes if m not in ABLATION_MODES]
    if unknown:
        raise CliError("unknown_mode", ",".join(unknown))
    cfg = _load(args.config)
    out = _outdir(args.out)
    (out / "config.resolved").write_text(dump_config(cfg))
    rows = run_ablation(cfg, modes)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    plotting.plot_ablation([r["mode"] for r in rows], [r["total"] for r in rows],
                           [r["predictor_ops"] for r in rows], out / "ablation.png")
    return EXIT_OK


def cmd_check(args):
    scopes = checks.SCOPES if args.scope == "all" else (args.scope,)
    failed = []
    lines = []
    for scope in scopes:
        results = checks.run_checks(scope)
        for r in results:
            status = "PASS" if r.ok else "FAIL"
            lines.append(f"{status} scope={scope} op={r.name} max_rel_err={r.error:.3e} tol={r.tolerance:.0e}")
            if not r.ok:
                failed.append(r)
        worst = max(r.error for r in results)
        lines.append(f"{'PASS' if all(r.ok for r in results) else 'FAIL'} scope={scope} max_rel_err={worst:.3e}")
    print("\n".join(lines))
    if args.out:
        out = _outdir(args.out)
        (out / "check.txt").write_text("\n".join(lines) + "\n")
    if failed:
        names = ",".join(f"{r.scope}.{r.name}" for r in failed)
        print(f"error=check_failed detail={names}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_flops(args):
    cfg = _load(args.config)
    out = _outdir(args.out)
    (out / "config.resolved").write_text(dump_config(cfg))
    rep = flops.report(cfg.T, cfg.N, cfg.D, cfg.ell, cfg.kappa, strided_tau=True,
                       all_tokens=cfg.T * cfg.N, reduced_tokens=cfg.T * cfg.K)
    (out / "flops.json").write_text(json.dumps(rep, indent=2))
    plotting.plot_flops(rep, out / "flops.png")
    print(json.dumps({"ratio": rep["closed_form"]["ratio"],
                      "decoder_ratio": rep["decoder"]["ratio"],
                      "bounds": [rep["decoder"]["linear_bound"], rep["decoder"]["quadratic_bound"]]}))
    return EXIT_OK


def cmd_synth(args):
    cfg = _load(args.config)
    out = _outdir(args.out)
    sc = scene_config(cfg)
    scenes = [dr.synthesize_scene(s, sc, data_seed=cfg.data_seed) for s in scene_seeds(cfg)]
    dr.save_dataset(out, scenes, sc, cfg.data_seed)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def make_parser():
    p = _Parser(prog="tokenbudget", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, fn, needs_config in (("train", cmd_train, True), ("ablate", cmd_ablate, True),
                                   ("check", cmd_check, False), ("flops", cmd_flops, True),
                                   ("synth", cmd_synth, True)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=needs_config)
        sp.add_argument("--out", required=name != "check", default=None)
        sp.set_defaults(func=fn)
        if name == "ablate":
            sp.add_argument("--modes", default="hard,soft,anchors_only",
                            help=f"comma-separated subset of {','.join(ABLATION_MODES)}")
        if name == "check":
            sp.add_argument("--scope", default="all", choices=checks.SCOPES + ("all",))
    return p


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        detail = " ".join(str(exc.detail).split())
        print(f"error={exc.code} detail={detail}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
