"""Reverse-mode automatic differentiation over dense numpy tensors.

Define-by-run: while a Tape is active, every primitive whose inputs carry
gradient appends one node (output, inputs, vector-Jacobian product closure).
Tape.backward walks the records in reverse exactly once and accumulates into
the .grad of every requires_grad leaf, so calling backward twice doubles the
stored gradients.

Shapes follow the model's needs and are documented per primitive:

    add/mul         numpy broadcasting, gradient un-broadcast to input shape
    matmul          (..., n, k) @ (..., k, m), batch dims broadcast
    transpose       axes permutation
    reshape/concat/pad/slice (basic indexing)
    take            gather rows along one axis, scatter-add backward
    embedding_lookup  take(table, ids, axis=0)
    conv1d_depthwise  x (B, T, C) * w (K, C), 'same' zero padding, odd K
    relu/swish/sigmoid/tanh    elementwise
    softmax/log_softmax(axis)  shift-stable
    layer_norm      normalizes the last axis; gain/bias shaped (C,)
    dropout         inverted scaling, counter-seeded, p=0 is identity
    scaled_dot_attention  composed from matmul/add/softmax; mask is additive
    sum/mean        reductions
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import NonFinite, NonScalarLoss, ShapeMismatch

DEFAULT_DTYPE = np.float32

_state = threading.local()

_debug_checks = False


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf assertions after every forward and backward primitive."""
    global _debug_checks
    _debug_checks = bool(on)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def astensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitives; use as a context manager around the
    forward pass, then call backward on the scalar loss."""

    def __init__(self):
        self.records: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self.records}
        for node in reversed(self.records):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            if _debug_checks:
                for ig in in_grads:
                    if ig is not None and not np.all(np.isfinite(ig)):
                        raise NonFinite(f"non-finite gradient in backward of {node.name}")
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if id(t) in produced:  # interior node: defer until visited
                    key = id(t)
                    grads[key] = ig if key not in grads else grads[key] + ig
                else:  # leaf: accumulate into .grad
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss."""
    tape.backward(loss)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(name: str, out: Tensor, inputs: tuple, vjp) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NonFinite(f"non-finite output of {name}")
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.records.append(_Node(name, out, inputs, vjp))
    return out


def apply_custom(name: str, inputs: tuple, out_data: np.ndarray, vjp) -> Tensor:
    """Insert a hand-differentiated operation (used by the CTC loss)."""
    inputs = tuple(astensor(x) for x in inputs)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    return _record(name, out, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)
    return _record("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)
    return _record("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, s: float) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)
    return _record("scale", out, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=a.requires_grad or b.requires_grad)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), vjp)


def transpose(a, axes: tuple) -> Tensor:
    a = astensor(a)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis),
                 requires_grad=any(t.requires_grad for t in ts))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), vjp)


def slice_(a, key) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data[key], requires_grad=a.requires_grad)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record("slice", out, (a,), vjp)


def pad(a, pad_width) -> Tensor:
    a = astensor(a)
    out = Tensor(np.pad(a.data, pad_width), requires_grad=a.requires_grad)
    key = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))
    return _record("pad", out, (a,), lambda g: (g[key],))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along an axis with integer indices; backward scatter-adds."""
    a = astensor(a)
    idx = np.asarray(indices)
    axis = axis % a.ndim
    out = Tensor(np.take(a.data, idx, axis=axis), requires_grad=a.requires_grad)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)  # view; add.at writes through
        src = tuple(range(axis, axis + idx.ndim))
        gmoved = np.moveaxis(g, src, tuple(range(idx.ndim)))
        np.add.at(moved, idx, gmoved)
        return (full,)

    return _record("take", out, (a,), vjp)


def embedding_lookup(table, ids) -> Tensor:
    t = astensor(table)
    if t.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {t.shape}")
    return take(t, np.asarray(ids, dtype=np.int64), axis=0)


def conv1d_depthwise(x, w) -> Tensor:
    """Per-channel temporal convolution with 'same' zero padding.

    x: (B, T, C); w: (K, C), K odd. y[b,t,c] = sum_k x[b, t+k-K//2, c] w[k,c].
    """
    x, w = astensor(x), astensor(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d_depthwise: x {x.shape}, w {w.shape}")
    K = w.shape[0]
    if K % 2 != 1:
        raise ShapeMismatch("conv1d_depthwise kernel size must be odd")
    B, T, C = x.shape
    P = K // 2
    xpad = np.pad(x.data, ((0, 0), (P, P), (0, 0)))
    out_data = np.zeros_like(x.data)
    for k in range(K):
        out_data += xpad[:, k:k + T, :] * w.data[k]
    out = Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad)

    def vjp(g):
        gxpad = np.zeros_like(xpad)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gxpad[:, k:k + T, :] += g * w.data[k]
            gw[k] = (g * xpad[:, k:k + T, :]).sum(axis=(0, 1))
        return gxpad[:, P:P + T, :], gw

    return _record("conv1d_depthwise", out, (x, w), vjp)


# --- elementwise nonlinearities ------------------------------------------------

def relu(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = astensor(a)
    y = _sigmoid(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    return _record("sigmoid", out, (a,), lambda g: (g * y * (1 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = astensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    return _record("tanh", out, (a,), lambda g: (g * (1 - y * y),))


def swish(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)
    return _record("swish", out, (a,), lambda g: (g * (s + a.data * s * (1 - s)),))


# --- normalizations -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=a.requires_grad)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, requires_grad=a.requires_grad)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    diff = x.data - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    out = Tensor(xhat * gain.data + bias.data,
                 requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad)

    def vjp(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record("layer_norm", out, (x, gain, bias), vjp)


def dropout(x, p: float, seed: int) -> Tensor:
    """Inverted dropout; identity when p == 0. The mask is a pure function of
    the integer seed, so runs reproduce bit-identically."""
    x = astensor(x)
    if p < 0 or p >= 1:
        raise ShapeMismatch(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = Tensor(x.data * mask, requires_grad=x.requires_grad)
    return _record("dropout", out, (x,), lambda g: (g * mask,))


# --- reductions ------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- attention --------------------------------------------------------------------

MASK_NEG = -1e30


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v.

    q: (..., T, d_k), k: (..., S, d_k), v: (..., S, d_v). ``mask`` is boolean,
    broadcastable to (..., T, S), True where attending is allowed; every query
    row must keep at least one allowed key.
    """
    q, k, v = astensor(q), astensor(k), astensor(v)
    dk = q.shape[-1]
    if k.shape[-1] != dk or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = scale(matmul(q, kt), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = add(scores, Tensor(np.where(mask, 0.0, MASK_NEG), dtype=scores.dtype))
    return matmul(softmax(scores, axis=-1), v)
