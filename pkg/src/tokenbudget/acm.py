"""Anchor-context merging.

Per frame: the top-K tokens by predicted score become anchors, every other
token is assigned to one anchor through a Gumbel-softmax over scaled
query-key similarities, and each anchor absorbs the projected values of its
assignees through a residual update. All frames are processed as one batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .predictor import ConfigError

HARD = "hard"
SOFT = "soft"
ANCHORS_ONLY = "anchors_only"
MERGE_MODES = (HARD, SOFT, ANCHORS_ONLY)


@dataclass
class Partition:
    anchors: nx.Var          # (..., K, D)
    context: nx.Var          # (..., N-K, D)
    anchor_indices: np.ndarray   # (..., K), ascending token positions
    context_indices: np.ndarray  # (..., N-K), ascending token positions


@dataclass
class MergeResult:
    soft: nx.Var     # (..., K, N-K)
    hard: nx.Var     # (..., K, N-K)
    merged: nx.Var   # (..., K, D)


@dataclass
class ReduceOutput:
    tokens: nx.Var   # (T*K, D)
    partition: Partition
    merge: MergeResult | None


def topk_indices(scores, K):
    """Anchor/context positions per row of ``scores`` (ties -> lower index)."""
    scores = np.asarray(scores, dtype=np.float64)
    N = scores.shape[-1]
    if not 1 <= K < N:
        raise ConfigError(f"anchor count K must satisfy 1 <= K < N={N}, got {K}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    anchors = np.sort(order[..., :K], axis=-1)
    context = np.sort(order[..., K:], axis=-1)
    return anchors, context


def partition_topk(tokens, scores, K):
    """Split (N, D) or (T, N, D) tokens by the per-frame top-K scores."""
    tokens = nx.as_var(tokens)
    scores = np.asarray(nx.value_of(scores))
    if scores.shape != tokens.shape[:-1]:
        raise nx.ShapeError(f"scores {scores.shape} do not match tokens {tokens.shape}")
    a_idx, c_idx = topk_indices(scores, K)
    N, D = tokens.shape[-2], tokens.shape[-1]
    if tokens.ndim == 2:
        return Partition(nx.take(tokens, a_idx, axis=0), nx.take(tokens, c_idx, axis=0), a_idx, c_idx)
    T = tokens.shape[0]
    flat = nx.reshape(tokens, (T * N, D))
    base = (np.arange(T) * N)[:, None]
    anchors = nx.reshape(nx.take(flat, (a_idx + base).reshape(-1), axis=0), (T, K, D))
    context = nx.reshape(nx.take(flat, (c_idx + base).reshape(-1), axis=0), (T, N - K, D))
    return Partition(anchors, context, a_idx, c_idx)


def init_params(D, D_head, rng):
    return {
        "W_Q": nx.uniform_init(rng, (D, D_head), D),
        "W_K": nx.uniform_init(rng, (D, D_head), D),
        "W_V": nx.uniform_init(rng, (D, D_head), D),
        "W_O": nx.uniform_init(rng, (D_head, D), D_head),
    }


def project_qkv(part, params):
    a_hat = nx.layer_norm(part.anchors)
    c_hat = nx.layer_norm(part.context)
    q = nx.matmul(a_hat, params["W_Q"])
    k = nx.matmul(c_hat, params["W_K"])
    v = nx.matmul(c_hat, params["W_V"])
    return q, k, v


def assign(q, k, temperature=1.0, rng=None):
    """Soft assignment (..., K, N-K): each context column distributes over anchors."""
    d_head = q.shape[-1]
    logits = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(d_head))
    return nx.gumbel_softmax(logits, temperature, rng, axis=-2)


def merge(part, assignment, v, w_o):
    """Residual merge: anchors + (assignment @ V) @ W_O."""
    return part.anchors + nx.matmul(nx.matmul(assignment, v), w_o)


def reduce_stack(stack, scores, params, K, temperature=1.0, rng=None, mode=HARD):
    """Reduce a (T, N, D) frame stack to T*K merged tokens, frame-major.

    ``stack`` is raw; it is normalized per token before partitioning.
    ``scores`` holds T*N importance values (Var or array).
    """
    if mode not in MERGE_MODES:
        raise ConfigError(f"unknown merge mode {mode!r}")
    stack = nx.as_var(stack)
    T, N, D = stack.shape
    s = np.asarray(nx.value_of(scores)).reshape(T, N)
    part = partition_topk(nx.layer_norm(stack), s, K)
    result = None
    if mode == ANCHORS_ONLY:
        merged = part.anchors
    else:
        q, k, v = project_qkv(part, params)
        soft = assign(q, k, temperature, rng)
        hard = nx.ste_harden(soft, axis=-2) if mode == HARD else soft
        merged = merge(part, hard, v, params["W_O"])
        result = MergeResult(soft, hard, merged)
    return ReduceOutput(nx.reshape(merged, (T * K, D)), part, result)


def merge_trace(out):
    """One record per frame: anchor positions and context -> anchor map."""
    part = out.partition
    a_idx = np.atleast_2d(part.anchor_indices)
    c_idx = np.atleast_2d(part.context_indices)
    records = []
    hard = None if out.merge is None else np.asarray(out.merge.hard.value)
    if hard is not None and hard.ndim == 2:
        hard = hard[None]
    for tau in range(a_idx.shape[0]):
        assignments = {}
        if hard is not None:
            winners = np.argmax(hard[tau], axis=0)
            assignments = {str(int(c)): int(a_idx[tau, w]) for c, w in zip(c_idx[tau], winners)}
        records.append({
            "tau": tau,
            "anchor_indices": [int(i) for i in a_idx[tau]],
            "assignments": assignments,
        })
    return records


def write_trace(path, out):
    with open(path, "w") as fh:
        for rec in merge_trace(out):
            fh.write(json.dumps(rec) + "\n")
