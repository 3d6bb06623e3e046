"""Closed-form and counted operation totals for token mixing and the decoder.

Empirical counts come from the matmul op counter during a real forward pass.
One matmul of (m x k) by (k x n) records 2*m*k*n, i.e. each multiply-add
pair counts as two operations. Closed forms keep only the dominant term, so
closed-form and counted totals differ by a constant per variant.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import numerics as nx
from . import predictor as pred
from . import teacher as tch
from .numerics import RngState

EXISTING = "existing"
PROPOSED = "proposed"
CONVENTION = "multiply-add"
CONVENTION_NOTE = "matmul (m x k)(k x n) counted as 2*m*k*n: each multiply-add pair is two operations"


def closed_form(T, N, D, ell, kappa, variant):
    """Dominant-term cost: D*(T*N)^2 for full mixing, D*(2l+1)^2*(T/kappa)*N^2 windowed."""
    if variant == EXISTING:
        return Fraction(D * (T * N) ** 2)
    if variant == PROPOSED:
        return Fraction(D * (2 * ell + 1) ** 2 * N ** 2) * Fraction(T, kappa)
    raise ValueError(f"unknown variant {variant!r}")


def mixing_census_formula(T, N, D, ell, kappa, variant, strided_tau=False):
    """Exact matmul census of one token-mixing pass, as implemented."""
    if variant == EXISTING:
        return 8 * D * (T * N) ** 2
    W = 2 * ell + 1
    n_tau = len(range(0, T, kappa)) if strided_tau else T
    return n_tau * (4 * W * W * N * N * D + 4 * W * N * N * D)


def empirical_count(T, N, D, ell, kappa, variant, strided_tau=False, seed=0, dtype=np.float32):
    """Run one token-mixing forward pass under the op counter and return its census."""
    rng = RngState(seed)
    spec = pred.WindowSpec(ell, kappa)
    stack = nx.layer_norm(rng.normal(size=(T, N, D)).astype(dtype)).value
    mode = pred.MIXER if variant == PROPOSED else pred.MIXER_NO_WINDOW
    params = pred.init_params(T, N, D, spec, 1, rng, mode=mode)
    w1 = params["block0.W1"].astype(dtype)
    w2 = params["block0.W2"].astype(dtype)
    with nx.count_ops() as counter:
        if variant == PROPOSED:
            pred.token_mix_all(stack, spec, w1, w2, strided_tau=strided_tau)
        else:
            pred.token_mix_full(stack, w1, w2)
    return counter.total


def decoder_census(n_tokens, decoder, seed=0):
    """Matmul census of one decoder forward over ``n_tokens`` positions."""
    x = RngState(seed).normal(size=(n_tokens, decoder.width)).astype(np.float32)
    dec32 = decoder.astype(np.float32)
    with nx.count_ops() as counter:
        tch.decode(x, dec32)
    return counter.total


def headline_ratio(all_tokens, reduced_tokens, decoder=None, width=128, depth=2, heads=4):
    """Decoder cost ratio between the all-token and the reduced sequence.

    The ratio sits between the linear bound all/reduced and the quadratic
    bound (all/reduced)^2.
    """
    if all_tokens < 1 or reduced_tokens < 1:
        raise ValueError("token counts must be positive")
    if decoder is None:
        decoder = tch.ToyDecoder(8, width, depth, heads, seed=0)
    full = decoder_census(all_tokens, decoder)
    reduced = decoder_census(reduced_tokens, decoder)
    linear = all_tokens / reduced_tokens
    return {
        "all_tokens": all_tokens,
        "reduced_tokens": reduced_tokens,
        "census_all": full,
        "census_reduced": reduced,
        "ratio": full / reduced,
        "linear_bound": linear,
        "quadratic_bound": linear ** 2,
    }


def report(T, N, D, ell, kappa, strided_tau=True, all_tokens=None, reduced_tokens=None,
           decoder=None):
    """FlopsReport as a JSON-ready dict."""
    cf_e = closed_form(T, N, D, ell, kappa, EXISTING)
    cf_p = closed_form(T, N, D, ell, kappa, PROPOSED)
    em_e = empirical_count(T, N, D, ell, kappa, EXISTING)
    em_p = empirical_count(T, N, D, ell, kappa, PROPOSED, strided_tau=strided_tau)
    ratio = cf_e / cf_p
    out = {
        "config": {"T": T, "N": N, "D": D, "ell": ell, "kappa": kappa, "strided_tau": strided_tau},
        "closed_form": {"existing": int(cf_e) if cf_e.denominator == 1 else float(cf_e),
                        "proposed": int(cf_p) if cf_p.denominator == 1 else float(cf_p),
                        "ratio": float(ratio), "ratio_exact": str(ratio)},
        "empirical": {"existing": em_e, "proposed": em_p, "ratio": em_e / em_p},
        "ratios": {
            "existing_census_over_closed_form": float(em_e / cf_e),
            "proposed_census_over_closed_form": float(em_p / cf_p),
            "no_benefit": bool(ratio <= 1),
        },
        "conventions": CONVENTION,
        "convention_note": CONVENTION_NOTE,
    }
    if all_tokens is not None and reduced_tokens is not None:
        out["decoder"] = headline_ratio(all_tokens, reduced_tokens, decoder)
    return out
