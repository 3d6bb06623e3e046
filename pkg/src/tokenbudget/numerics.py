"""Dense tensor primitives with hand-written backward passes.

Arrays are plain numpy arrays (float64 unless a caller opts into float32).
``Var`` pairs a value with an accumulated gradient and a closure that pushes
cotangents to its parents; only the primitives defined here create them, so
the tape stays as small as the pipeline needs.
"""

from __future__ import annotations

import contextlib
import math
import threading
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class DegenerateAxisError(ValueError):
    pass


class DomainError(ValueError):
    pass


class StepSizeWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# op counting

class OpCounter:
    """Per-run accumulator of scalar operations recorded by ``matmul``."""

    def __init__(self):
        self.total = 0
        self.by_op = Counter()

    def add(self, name, n):
        self.total += int(n)
        self.by_op[name] += int(n)


_local = threading.local()


@contextlib.contextmanager
def count_ops():
    """Enable op counting for the current thread; yields the counter."""
    counter = OpCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _record(name, n):
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(name, n)


# --------------------------------------------------------------------------
# rng

@dataclass
class RngState:
    """Counter-based random stream (Philox keyed by ``seed``).

    Identical ``(seed, counter)`` pairs give identical draws everywhere.
    ``counter`` advances as samples are consumed.
    """

    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(self.counter) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(key=self.seed, counter=self.counter)
        self._gen = np.random.Generator(bitgen)

    @property
    def generator(self):
        return self._gen

    def sync(self):
        """Refresh ``counter`` from the underlying bit generator."""
        self.counter = int(self._gen.bit_generator.state["state"]["counter"][0])
        return self

    def derive(self, tag):
        """Independent child stream for a named purpose."""
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        words += [ord(c) for c in str(tag)]
        child = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0]
        return RngState(int(child))

    def uniform(self, low=0.0, high=1.0, size=None):
        out = self._gen.uniform(low, high, size)
        self.sync()
        return out

    def normal(self, loc=0.0, scale=1.0, size=None):
        out = self._gen.normal(loc, scale, size)
        self.sync()
        return out

    def permutation(self, n):
        out = self._gen.permutation(n)
        self.sync()
        return out

    def gumbel(self, size):
        u = self._gen.uniform(0.0, 1.0, size)
        self.sync()
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
        return -np.log(-np.log(u))


def uniform_init(rng, shape, fan_in, dtype=np.float64):
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# Var

class Var:
    """Value plus accumulated cotangent (a dual tensor)."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        if seed is None:
            if self.value.size != 1:
                raise ShapeError(f"backward without seed needs a scalar, got {self.value.shape}")
            seed = np.ones_like(self.value)
        order = _topo(self)
        self.grad = np.asarray(seed, dtype=self.value.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return swap_last(self)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _make(value, parents, backward):
    live = tuple(p for p in parents if p.requires_grad)
    out = Var(value)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _accum(var, g):
    if not var.requires_grad:
        return
    g = _unbroadcast(g, var.value.shape)
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives

def _scalar_op(a, fwd, bwd):
    a = as_var(a)

    def backward(g):
        _accum(a, bwd(g))

    return _make(fwd(a.value), (a,), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes; counts 2*m*k*n per batch."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = np.matmul(av, bv)
    m, k, n = av.shape[-2], av.shape[-1], bv.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _record("matmul", 2 * batch * m * k * n)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(bv, -1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(av, -1, -2), g))

    return _make(out, (a, b), backward)


def _const(x):
    # python scalars stay weakly typed so float32 graphs are not upcast
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b):
    if _const(b):
        return _scalar_op(a, lambda v: v + b, lambda g: g)
    a, b = as_var(a), as_var(b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b):
    if _const(b):
        return _scalar_op(a, lambda v: v - b, lambda g: g)
    a, b = as_var(a), as_var(b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b):
    if _const(b):
        return _scalar_op(a, lambda v: v * b, lambda g: g * b)
    if _const(a):
        return mul(b, a)
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, g * bv)
        if b.requires_grad:
            _accum(b, g * av)

    return _make(av * bv, (a, b), backward)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    x = as_var(x)
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        _accum(x, g * (cdf + xv * pdf))

    return _make(xv * cdf, (x,), backward)


def layer_norm(x, eps=LN_EPS):
    """Zero-mean, unit-variance normalization over the last axis (no affine)."""
    x = as_var(x)
    xv = x.value
    d = xv.shape[-1]
    if d < 2:
        raise DegenerateAxisError(f"layer_norm needs last-axis extent >= 2, got {xv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), backward)


def softmax(x, axis=-1):
    x = as_var(x)
    xv = x.value
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def gumbel_softmax(logits, temperature=1.0, rng=None, axis=-2):
    """Softmax of (logits + Gumbel noise) / temperature along ``axis``.

    ``axis`` defaults to the anchor axis of a K x C assignment block. With
    ``rng=None`` the noise is zero.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    logits = as_var(logits)
    z = logits
    if rng is not None:
        z = add(z, rng.gumbel(logits.value.shape))
    return softmax(mul(z, 1.0 / temperature), axis=axis)


def ste_harden(soft, axis=-2):
    """One-hot argmax along ``axis`` forward; identity Jacobian backward.

    Ties go to the lowest index.
    """
    soft = as_var(soft)
    sv = soft.value
    idx = np.expand_dims(np.argmax(sv, axis=axis), axis)
    hard = np.zeros_like(sv)
    np.put_along_axis(hard, idx, 1.0, axis=axis)

    def backward(g):
        _accum(soft, g)

    return _make(hard, (soft,), backward)


def l1_loss(pred, target):
    """Mean absolute difference; subgradient 0 at zero difference."""
    pred, target = as_var(pred), as_var(target)
    if pred.value.shape != target.value.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.value.shape} vs {target.value.shape}")
    d = pred.value - target.value
    n = d.size

    def backward(g):
        s = np.sign(d) * (g / n)
        _accum(pred, s)
        _accum(target, -s)

    return _make(np.abs(d).mean(), (pred, target), backward)


def mean(x, axis=None, keepdims=False):
    x = as_var(x)
    xv = x.value
    out = xv.mean(axis=axis, keepdims=keepdims)
    count = xv.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / count, xv.shape).copy())

    return _make(out, (x,), backward)


def sum_(x, axis=None, keepdims=False):
    x = as_var(x)
    xv = x.value

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, xv.shape).copy())

    return _make(xv.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reshape(x, shape):
    x = as_var(x)
    old = x.value.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _make(x.value.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = as_var(x)
    inv = np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _make(np.transpose(x.value, axes), (x,), backward)


def swap_last(x):
    x = as_var(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in backward."""
    x = as_var(x)
    indices = np.asarray(indices, dtype=np.intp)
    xv = x.value

    def backward(g):
        gx = np.zeros_like(xv)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, indices, np.moveaxis(g, axis, 0))
        _accum(x, gx)

    return _make(np.take(xv, indices, axis=axis), (x,), backward)


def embed(x, indices, size, axis=0):
    """Place slices of ``x`` at ``indices`` of a zero array with ``size`` along ``axis``."""
    x = as_var(x)
    indices = np.asarray(indices, dtype=np.intp)
    xv = x.value
    shape = list(xv.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=xv.dtype)
    np.moveaxis(out, axis, 0)[indices] = np.moveaxis(xv, axis, 0)

    def backward(g):
        _accum(x, np.take(g, indices, axis=axis))

    return _make(out, (x,), backward)


def concat(xs, axis=0):
    xs = [as_var(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accum(x, part)

    return _make(np.concatenate([x.value for x in xs], axis=axis), xs, backward)


# --------------------------------------------------------------------------
# gradient checking

STEP_WARN = 1e-2


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(f, x, h=1e-6, exclude=None):
    """Max relative error between the analytic gradient of scalar ``f`` at ``x``
    and central differences with step ``h``.

    ``f`` maps a ``Var`` to a scalar ``Var``. ``exclude`` is an optional boolean
    mask of coordinates to skip (kinks).
    """
    if h > STEP_WARN:
        warnings.warn(f"finite-difference step h={h} is too large for a reliable check",
                      StepSizeWarning, stacklevel=2)
    x = np.array(x, dtype=np.float64)
    v = Var(x.copy(), requires_grad=True)
    f(v).backward()
    analytic = v.grad if v.grad is not None else np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        if exclude is not None and np.asarray(exclude).reshape(-1)[i]:
            continue
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Var(xp.reshape(x.shape))).value)
        fm = float(f(Var(xm.reshape(x.shape))).value)
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = _rel_err(analytic, numeric)
    if exclude is not None:
        err = np.where(np.asarray(exclude), 0.0, err)
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn, params, h=1e-6, names=None):
    """Per-parameter max relative error for ``loss_fn(dict of Var) -> scalar Var``."""
    names = list(params) if names is None else list(names)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    vars_ = {k: Var(v.copy(), requires_grad=k in names) for k, v in base.items()}
    loss_fn(vars_).backward()
    errs = {}
    for name in names:
        analytic = vars_[name].grad
        if analytic is None:
            analytic = np.zeros_like(base[name])
        numeric = np.zeros_like(base[name])
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            vals = []
            for step in (h, -h):
                pert = flat.copy()
                pert[i] += step
                trial = {k: Var(v) for k, v in base.items()}
                trial[name] = Var(pert.reshape(base[name].shape))
                vals.append(float(loss_fn(trial).value))
            numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2.0 * h)
        errs[name] = float(_rel_err(analytic, numeric).max()) if numeric.size else 0.0
    return errs
