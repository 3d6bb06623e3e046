"""Named gradient-check suites, grouped by scope.

Every check returns the max relative error of analytic vs. central-difference
gradients in float64. Checks look primitives up on their modules at call time,
so a patched primitive is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import acm
from . import driving as dr
from . import numerics as nx
from . import predictor as pred
from . import teacher as tch
from .numerics import RngState

TOLERANCE = {"numerics": 1e-6, "predictor": 1e-5, "acm": 1e-5, "e2e": 1e-4}
SCOPES = tuple(TOLERANCE)


@dataclass
class CheckResult:
    scope: str
    name: str
    error: float
    tolerance: float

    @property
    def ok(self):
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _rng(tag):
    return RngState(1234).derive(tag)


def _weights(shape, tag):
    return _rng(tag).normal(size=shape)


# ---- numerics

def _numerics_checks():
    w = _weights((4, 3), "w")
    yield "matmul", lambda: nx.grad_check(lambda x: nx.sum_(nx.matmul(x, w) * w.sum()), _weights((5, 4), "a"))
    yield "matmul_rhs", lambda: nx.grad_check(lambda x: nx.sum_(nx.matmul(w.T, x) * _weights((3, 2), "c")), _weights((4, 2), "b"))
    yield "layer_norm", lambda: nx.grad_check(lambda x: nx.sum_(nx.layer_norm(x) * _weights((3, 8), "ln")), _weights((3, 8), "lnx"))
    yield "gelu", lambda: nx.grad_check(lambda x: nx.sum_(nx.gelu(x) * np.linspace(-1, 2, 17)), np.linspace(-4, 4, 17))
    yield "softmax", lambda: nx.grad_check(lambda x: nx.sum_(nx.softmax(x, axis=-1) * _weights((3, 5), "sm")), _weights((3, 5), "smx"))
    yield "gumbel_softmax", lambda: nx.grad_check(
        lambda x: nx.sum_(nx.gumbel_softmax(x, 0.7, None, axis=-2) * _weights((4, 6), "gs")), _weights((4, 6), "gsx"))
    yield "l1_loss", lambda: nx.grad_check(lambda x: nx.l1_loss(x, np.zeros((3, 4))), _weights((3, 4), "l1"))
    yield "take", lambda: nx.grad_check(lambda x: nx.sum_(nx.take(x, [0, 2, 2, 1], axis=0) * _weights((4, 3), "tk")), _weights((3, 3), "tkx"))
    yield "embed", lambda: nx.grad_check(lambda x: nx.sum_(nx.embed(x, [0, 3], 5, axis=0) * _weights((5, 2), "em")), _weights((2, 2), "emx"))
    yield "concat", lambda: nx.grad_check(lambda x: nx.sum_(nx.concat([x, x * 2.0], axis=0) * _weights((4, 3), "cc")), _weights((2, 3), "ccx"))
    yield "mean", lambda: nx.grad_check(lambda x: nx.sum_(nx.mean(x, axis=0) * _weights((3,), "mn")), _weights((4, 3), "mnx"))
    yield "transpose", lambda: nx.grad_check(lambda x: nx.sum_(nx.transpose(x, (1, 0, 2)) * _weights((3, 2, 4), "tp")), _weights((2, 3, 4), "tpx"))


# ---- predictor

def _predictor_checks():
    T, N, D = 3, 4, 5
    spec = pred.WindowSpec(1, 1)
    stack = _weights((T, N, D), "stack")
    params = pred.init_params(T, N, D, spec, 2, _rng("pp"))
    z = nx.layer_norm(stack).value
    probe_h = _weights((N, D), "probe_h")
    w1, w2 = params["block0.W1"], params["block0.W2"]

    for tau in (0, 1, 2):
        yield f"token_mix[tau={tau}]", (lambda tau=tau: max(nx.grad_check_params(
            lambda p: nx.sum_(pred.token_mix(p["z"], tau, spec, p["w1"], p["w2"]) * probe_h),
            {"z": z, "w1": w1, "w2": w2}).values()))

    probe_u = _weights((T * N, D), "probe_u")
    yield "channel_mix", lambda: max(nx.grad_check_params(
        lambda p: nx.sum_(pred.channel_mix(p["h"], p["w3"], p["w4"]) * probe_u),
        {"h": _weights((T * N, D), "h"), "w3": params["block0.W3"], "w4": params["block0.W4"]}).values())

    probe_s = _weights((T * N,), "probe_s")

    def full_loss(p):
        p = dict(p)
        stk = p.pop("stack")
        return nx.sum_(pred.predict_importance(stk, p, spec) * probe_s)

    yield "predict_importance", lambda: max(nx.grad_check_params(
        full_loss, {"stack": stack, **params}).values())

    spec2 = pred.WindowSpec(1, 2)
    params2 = pred.init_params(5, N, D, spec2, 1, _rng("pp2"))
    stack2 = _weights((5, N, D), "stack2")
    probe2 = _weights((5 * N,), "probe2")
    yield "predict_importance[strided]", lambda: max(nx.grad_check_params(
        lambda p: nx.sum_(pred.predict_importance(p["stack"], {k: v for k, v in p.items() if k != "stack"},
                                                  spec2, strided_tau=True) * probe2),
        {"stack": stack2, **params2}).values())


# ---- acm

def _acm_checks():
    T, N, D, K, Dh = 2, 6, 5, 2, 4
    tokens = _weights((T, N, D), "acm_tokens")
    scores = _weights((T, N), "acm_scores")
    params = acm.init_params(D, Dh, _rng("acm"))
    part = acm.partition_topk(nx.layer_norm(tokens).value, scores, K)

    def qkv_loss(p):
        pr = acm.Partition(p["A"], p["C"], part.anchor_indices, part.context_indices)
        q, k, v = acm.project_qkv(pr, p)
        return nx.sum_(q * 0.3) + nx.sum_(nx.mul(k, k)) + nx.sum_(v * _weights(v.shape, "vp"))

    base = {"A": part.anchors.value, "C": part.context.value, **params}
    yield "project_qkv", lambda: max(nx.grad_check_params(qkv_loss, base).values())

    probe_m = _weights((T, K, N - K), "probe_m")
    yield "assign", lambda: max(nx.grad_check_params(
        lambda p: nx.sum_(acm.assign(p["q"], p["k"], 0.8) * probe_m),
        {"q": _weights((T, K, Dh), "q"), "k": _weights((T, N - K, Dh), "k")}).values())

    hard = nx.ste_harden(acm.assign(_weights((T, K, Dh), "q"), _weights((T, N - K, Dh), "k"))).value
    probe_a = _weights((T, K, D), "probe_a")
    yield "merge", lambda: max(nx.grad_check_params(
        lambda p: nx.sum_(acm.merge(acm.Partition(p["A"], None, None, None), hard, p["V"], p["W_O"]) * probe_a),
        {"A": part.anchors.value, "V": _weights((T, N - K, Dh), "v"), "W_O": params["W_O"]}).values())

    probe_r = _weights((T * K, D), "probe_r")
    for mode in (acm.SOFT, acm.HARD):
        # hard mode: input and W_Q/W_K gradients go through the STE, which
        # finite differences cannot see
        names = list(params) + ["stack"] if mode == acm.SOFT else ["W_V", "W_O"]

        def reduce_loss(p, mode=mode):
            stk = p["stack"]
            prm = {k: v for k, v in p.items() if k != "stack"}
            return nx.sum_(acm.reduce_stack(stk, scores, prm, K, 0.9, None, mode=mode).tokens * probe_r)

        yield f"reduce_stack[{mode}]", (lambda names=names, fn=reduce_loss: max(nx.grad_check_params(
            fn, {"stack": tokens, **params}, names=names).values()))


# ---- end to end

def micro_model():
    cfg = dr.SceneConfig(T=2, N=4, D=6, T_plus=2, salient_per_frame=1)
    model = dr.build_model(2, 4, 6, T_plus=2, ell=1, kappa=1, L=1, K=1, D_head=4,
                           teacher_width=8, teacher_depth=1, teacher_heads=2, n_text=2,
                           head_hidden=4, init_seed=7)
    return model, dr.synthesize_scene(3, cfg)


def e2e_error(model=None, scene=None, lam=50.0):
    if model is None:
        model, scene = micro_model()
    pseudo = tch.auxiliary_pass(scene.tokens, model.text, model.teacher)

    def loss(p):
        return dr.loss_terms(model, scene, p, lam, temperature=1.0, rng=None, pseudo=pseudo)[0]

    return max(nx.grad_check_params(loss, model.params).values())


def _e2e_checks():
    yield "pipeline", e2e_error


_SUITES = {
    "numerics": _numerics_checks,
    "predictor": _predictor_checks,
    "acm": _acm_checks,
    "e2e": _e2e_checks,
}


def run_checks(scope):
    if scope not in _SUITES:
        raise KeyError(f"unknown check scope {scope!r}")
    results = []
    for name, fn in _SUITES[scope]():
        try:
            err = float(fn())
        except Exception:  # a crashing check is a failing check
            err = float("inf")
        results.append(CheckResult(scope, name, err, TOLERANCE[scope]))
    return results
