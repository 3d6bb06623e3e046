"""Sliding-window MLP-Mixer importance predictor.

Tokens for the last T frames arrive as a (T, N, D) array. Each block
normalizes per token, mixes tokens inside a dilated temporal window that is
clamped at the sequence ends, then mixes channels per token. A linear head
reads one score per token. Frame indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Var


class ConfigError(ValueError):
    pass


MIXER = "mixer"
MIXER_NO_WINDOW = "mixer_no_window"
PREDICTOR_MODES = (MIXER, MIXER_NO_WINDOW)


@dataclass(frozen=True)
class WindowSpec:
    radius: int
    dilation: int = 1

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError(f"window radius must be >= 1, got {self.radius}")
        if not 1 <= self.dilation <= self.radius + 1:
            raise ConfigError(f"dilation must lie in [1, {self.radius + 1}], got {self.dilation}")

    @property
    def size(self):
        return 2 * self.radius + 1


def window_indices(tau, T, spec):
    """Frames tau - radius*dilation, ..., tau + radius*dilation, clamped to [0, T-1]."""
    if not 0 <= tau < T:
        raise IndexError(f"frame index {tau} outside [0, {T})")
    offsets = np.arange(-spec.radius, spec.radius + 1) * spec.dilation
    return tuple(int(i) for i in np.clip(tau + offsets, 0, T - 1))


def window_table(T, spec):
    return np.array([window_indices(t, T, spec) for t in range(T)], dtype=np.intp)


def gather_window(stack, tau, spec):
    """Stack the window frames of a normalized (T, N, D) stack into (|W|*N, D)."""
    stack = nx.as_var(stack)
    T, N, D = stack.shape
    frames = nx.take(stack, window_indices(tau, T, spec), axis=0)
    return nx.reshape(frames, (spec.size * N, D))


def token_mix(stack, tau, spec, w1, w2):
    """H_tau = Z_tau + W2 @ gelu(W1 @ window(tau)) for one frame."""
    stack = nx.as_var(stack)
    T, N, D = stack.shape
    _check_token_weights(w1, w2, spec.size * N, N)
    hidden = nx.gelu(nx.matmul(w1, gather_window(stack, tau, spec)))
    current = nx.reshape(nx.take(stack, [tau], axis=0), (N, D))
    return current + nx.matmul(w2, hidden)


def token_mix_all(stack, spec, w1, w2, strided_tau=False):
    """Windowed token mixing for every frame at once -> (T, N, D).

    With ``strided_tau`` only frames 0, dilation, 2*dilation, ... are mixed;
    the others keep their residual input.
    """
    stack = nx.as_var(stack)
    T, N, D = stack.shape
    W = spec.size
    _check_token_weights(w1, w2, W * N, N)
    taus = np.arange(0, T, spec.dilation) if strided_tau else np.arange(T)
    table = window_table(T, spec)[taus]
    n = len(taus)
    # frames side by side as columns -> one GEMM per weight instead of n
    windows = nx.reshape(nx.take(stack, table.reshape(-1), axis=0), (n, W * N, D))
    cols = nx.reshape(nx.transpose(windows, (1, 0, 2)), (W * N, n * D))
    mixed = nx.matmul(w2, nx.gelu(nx.matmul(w1, cols)))
    delta = nx.transpose(nx.reshape(mixed, (N, n, D)), (1, 0, 2))
    if strided_tau:
        delta = nx.embed(delta, taus, T, axis=0)
    return stack + delta


def token_mix_full(stack, w1, w2):
    """Conventional token mixing over all T*N tokens (no window)."""
    stack = nx.as_var(stack)
    T, N, D = stack.shape
    _check_token_weights(w1, w2, T * N, T * N)
    flat = nx.reshape(stack, (T * N, D))
    out = flat + nx.matmul(w2, nx.gelu(nx.matmul(w1, flat)))
    return nx.reshape(out, (T, N, D))


def _check_token_weights(w1, w2, width, rows):
    s1, s2 = nx.value_of(w1).shape, nx.value_of(w2).shape
    if s1 != (2 * width, width) or s2 != (rows, 2 * width):
        raise nx.ShapeError(
            f"token mixing weights {s1}, {s2} do not match window width {width}"
            f" (expected {(2 * width, width)}, {(rows, 2 * width)})")


def channel_mix(h, w3, w4):
    """U = LN(H) + gelu(LN(H) W3^T) W4^T, applied per token (row)."""
    h = nx.as_var(h)
    D = h.shape[-1]
    s3, s4 = nx.value_of(w3).shape, nx.value_of(w4).shape
    if s3 != (2 * D, D) or s4 != (D, 2 * D):
        raise nx.ShapeError(f"channel mixing weights {s3}, {s4} do not match D={D}")
    hn = nx.layer_norm(h)
    hidden = nx.gelu(nx.matmul(hn, nx.swap_last(w3)))
    return hn + nx.matmul(hidden, nx.swap_last(w4))


def init_params(T, N, D, spec, L, rng, mode=MIXER):
    """Uniform(-a, a) init with a = 1/sqrt(fan_in)."""
    if mode not in PREDICTOR_MODES:
        raise ConfigError(f"unknown predictor mode {mode!r}")
    width = spec.size * N if mode == MIXER else T * N
    rows = N if mode == MIXER else T * N
    params = {}
    for b in range(L):
        params[f"block{b}.W1"] = nx.uniform_init(rng, (2 * width, width), width)
        params[f"block{b}.W2"] = nx.uniform_init(rng, (rows, 2 * width), 2 * width)
        params[f"block{b}.W3"] = nx.uniform_init(rng, (2 * D, D), D)
        params[f"block{b}.W4"] = nx.uniform_init(rng, (D, 2 * D), 2 * D)
    params["W5"] = nx.uniform_init(rng, (1, D), D)
    return params


def num_blocks(params):
    return sum(1 for k in params if k.endswith(".W1"))


def predict_importance(stack, params, spec, strided_tau=False, mode=MIXER):
    """Scores for all T*N tokens, frame-major. Returns a Var of shape (T*N,)."""
    stack = nx.as_var(stack)
    if stack.ndim != 3:
        raise ConfigError(f"frame stack must be (T, N, D), got {stack.shape}")
    T, N, D = stack.shape
    if "W5" not in params or nx.value_of(params["W5"]).shape != (1, D):
        raise ConfigError(f"score head must have shape (1, {D})")
    L = num_blocks(params)
    x = stack
    for b in range(L):
        z = nx.layer_norm(x)
        w1, w2 = params[f"block{b}.W1"], params[f"block{b}.W2"]
        try:
            if mode == MIXER:
                h = token_mix_all(z, spec, w1, w2, strided_tau=strided_tau)
            elif mode == MIXER_NO_WINDOW:
                h = token_mix_full(z, w1, w2)
            else:
                raise ConfigError(f"unknown predictor mode {mode!r}")
        except nx.ShapeError as exc:
            raise ConfigError(str(exc)) from exc
        x = channel_mix(h, params[f"block{b}.W3"], params[f"block{b}.W4"])
    if L == 0:
        x = nx.layer_norm(x)
    scores = nx.matmul(nx.reshape(x, (T * N, D)), nx.swap_last(params["W5"]))
    return nx.reshape(scores, (T * N,))


class ImportancePredictor:
    """Scorer interface used by the training loop.

    Any object with ``params`` and ``__call__(stack, params) -> Var (T*N,)``
    can stand in for it (e.g. an attention-based scorer for ablations).
    """

    def __init__(self, T, N, D, spec, L, rng, mode=MIXER, strided_tau=False):
        self.spec = spec
        self.mode = mode
        self.strided_tau = strided_tau
        self.params = init_params(T, N, D, spec, L, rng, mode=mode)

    def __call__(self, stack, params=None):
        params = self.params if params is None else params
        return predict_importance(stack, params, self.spec,
                                  strided_tau=self.strided_tau, mode=self.mode)
