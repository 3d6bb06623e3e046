"""Frozen toy decoder and attention-derived pseudo-supervision.

The decoder is a small pre-norm, bidirectional transformer with no positional
encoding. Its weights are drawn once from ``seed`` and marked read-only.

A real backbone attends to decision-relevant evidence because it was trained
to; a randomly initialized one does not. To emulate that, the decoder can be
given a ``focus`` direction in visual-token space: every block then adds a
shared query bias aligned with the keys that tokens along ``focus`` produce,
so all queries attend more to such tokens.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import RngState, Var


class ConfigError(ValueError):
    pass


@dataclass
class TokenSequence:
    """Visual block first, then text. ``tokens_per_frame`` maps visual rows to frames."""

    visual: object   # (n_visual, width) Var or array
    text: object     # (n_text, width) Var or array
    tokens_per_frame: int

    @property
    def n_visual(self):
        return nx.value_of(self.visual).shape[0]

    @property
    def n_text(self):
        return nx.value_of(self.text).shape[0]

    def __len__(self):
        return self.n_visual + self.n_text

    def tokens(self):
        return nx.concat([self.visual, self.text], axis=0)

    def visual_positions(self):
        return np.arange(self.n_visual)

    def locate(self, position):
        """(modality, frame, token) for a sequence position."""
        if not 0 <= position < len(self):
            raise IndexError(f"position {position} outside sequence of length {len(self)}")
        if position < self.n_visual:
            frame, token = divmod(position, self.tokens_per_frame)
            return ("visual", frame, token)
        return ("text", None, position - self.n_visual)


@dataclass
class PseudoSignals:
    scores: np.ndarray              # column means restricted to visual positions
    full_column_means: np.ndarray   # column means over all S positions


class ToyDecoder:
    def __init__(self, d_visual, width=128, depth=2, heads=4, seed=0,
                 focus=None, focus_gain=3.0, value_mixing=True, dtype=np.float64):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.d_visual = d_visual
        self.width = width
        self.depth = depth
        self.heads = heads
        self.seed = seed
        rng = RngState(seed)
        w = {"visual_proj": nx.uniform_init(rng, (d_visual, width), d_visual)}
        for b in range(depth):
            for name in ("W_q", "W_k", "W_v", "W_o"):
                w[f"block{b}.{name}"] = nx.uniform_init(rng, (width, width), width)
            w[f"block{b}.b_q"] = np.zeros(width)
            w[f"block{b}.W_ff1"] = nx.uniform_init(rng, (width, 2 * width), width)
            w[f"block{b}.W_ff2"] = nx.uniform_init(rng, (2 * width, width), 2 * width)
            if not value_mixing:
                w[f"block{b}.W_v"] = np.zeros((width, width))
                w[f"block{b}.W_ff2"] = np.zeros((2 * width, width))
        if focus is not None:
            self._install_focus(w, np.asarray(focus, dtype=np.float64), focus_gain)
        for k in w:
            w[k] = np.ascontiguousarray(w[k], dtype=dtype)
            w[k].flags.writeable = False
        self.weights = w

    def _install_focus(self, w, focus, gain):
        # key produced by a pure focus token, per head; bias the queries toward it
        x = nx.layer_norm(focus[None, :] @ w["visual_proj"]).value[0]
        dh = self.width // self.heads
        for b in range(self.depth):
            key = x @ w[f"block{b}.W_k"]
            bias = np.zeros(self.width)
            for h in range(self.heads):
                sl = slice(h * dh, (h + 1) * dh)
                kh = key[sl]
                bias[sl] = gain * math.sqrt(dh) * kh / (np.linalg.norm(kh) ** 2 + 1e-12)
            w[f"block{b}.b_q"] = bias

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k]).tobytes())
        return h.hexdigest()

    def project_visual(self, tokens):
        """Frozen projection of (..., d_visual) tokens to model width."""
        return nx.matmul(tokens, self.weights["visual_proj"])

    def astype(self, dtype):
        clone = object.__new__(ToyDecoder)
        clone.__dict__.update(self.__dict__)
        clone.weights = {}
        for k, v in self.weights.items():
            arr = v.astype(dtype)
            arr.flags.writeable = False
            clone.weights[k] = arr
        return clone


def _attention(x, model, b, capture):
    w = model.weights
    S, width = x.shape
    H, dh = model.heads, width // model.heads
    xn = nx.layer_norm(x)
    q = nx.matmul(xn, w[f"block{b}.W_q"]) + w[f"block{b}.b_q"]
    k = nx.matmul(xn, w[f"block{b}.W_k"])
    v = nx.matmul(xn, w[f"block{b}.W_v"])

    def heads(t):
        return nx.transpose(nx.reshape(t, (S, H, dh)), (1, 0, 2))

    logits = nx.mul(nx.matmul(heads(q), nx.swap_last(heads(k))), 1.0 / math.sqrt(dh))
    probs = nx.softmax(logits, axis=-1)
    mixed = nx.reshape(nx.transpose(nx.matmul(probs, heads(v)), (1, 0, 2)), (S, width))
    out = x + nx.matmul(mixed, w[f"block{b}.W_o"])
    return out, (probs.value if capture else None)


def decode(tokens, model, capture_attention=False):
    """Run the decoder on (S, width) tokens.

    Returns (outputs, attention) where attention is the last block's
    (heads, S, S) probability array (rows are queries) or None.
    """
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens()
    x = nx.as_var(tokens)
    if x.ndim != 2 or x.shape[1] != model.width:
        raise ConfigError(f"decoder expects (S, {model.width}) tokens, got {x.shape}")
    if x.shape[0] < 1:
        raise ConfigError("empty token sequence")
    attn = None
    w = model.weights
    for b in range(model.depth):
        last = b == model.depth - 1
        x, probs = _attention(x, model, b, capture_attention and last)
        if probs is not None:
            attn = probs
        hidden = nx.gelu(nx.matmul(nx.layer_norm(x), w[f"block{b}.W_ff1"]))
        x = x + nx.matmul(hidden, w[f"block{b}.W_ff2"])
    return nx.layer_norm(x), attn


def pseudo_scores(attention, visual_positions):
    """Head-average, then column means over all query rows."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 2:
        attention = attention[None]
    S = attention.shape[-1]
    pos = np.asarray(visual_positions, dtype=np.intp)
    if pos.size and (pos.min() < 0 or pos.max() >= S):
        raise IndexError(f"visual positions out of range for sequence length {S}")
    col = attention.mean(axis=0).mean(axis=0)
    return PseudoSignals(scores=col[pos].copy(), full_column_means=col)


def auxiliary_pass(stack, text, model):
    """All-token teacher pass -> pseudo scores for the T*N visual tokens."""
    stack = np.asarray(nx.value_of(stack))
    T, N, D = stack.shape
    if D != model.d_visual:
        raise ConfigError(f"teacher expects visual width {model.d_visual}, got {D}")
    visual = model.project_visual(stack.reshape(T * N, D)).value
    seq = TokenSequence(visual, np.asarray(nx.value_of(text)), N)
    _, attn = decode(seq, model, capture_attention=True)
    return pseudo_scores(attn, seq.visual_positions())
