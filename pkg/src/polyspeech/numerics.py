"""Dense float64 tensor math with reverse-mode differentiation.

Small enough to audit, big enough for the toy transformers in this package.
Everything runs in 64-bit so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A numpy float64 array with an optional gradient buffer.

    Tensors built from other tensors remember their parents and a backward
    closure; calling backward() on a scalar runs reverse-mode accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- helpers ------------------------------------------------------------

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *dims):
        return reshape(self, dims)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive ops -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = float(b)
        out_data = a.data * scalar

        def bwd_scalar(g):
            a._accumulate(g * scalar)

        return _make(out_data, (a,), bwd_scalar)
    out_data = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def tpow(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data ** exponent

    def bwd(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, dims) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(dims), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def tslice(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make(a.data[key].copy(), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        offset = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            p._accumulate(g[tuple(idx)])
            offset += s

    return _make(out_data, tuple(parts), bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup: out[i] = table[idx[i]] (embedding forward)."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = table.data[idx]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), bwd)


def put_rows(rows: Tensor, idx, length: int) -> Tensor:
    """Scatter rows into a zero matrix of `length` rows at positions idx."""
    rows = _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((length,) + rows.data.shape[1:], dtype=np.float64)
    out_data[idx] = rows.data

    def bwd(g):
        rows._accumulate(g[idx])

    return _make(out_data, (rows,), bwd)


def take_pairs(a: Tensor, rows, cols) -> Tensor:
    """out[i] = a[rows[i], cols[i]] for a 2-D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out_data = a.data[rows, cols]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, cols), g)

    return _make(out_data, (a,), bwd)


def repeat(a: Tensor, times: int, axis: int = 0) -> Tensor:
    """np.repeat along an axis (each element repeated `times` in place)."""
    a = _as_tensor(a)
    out_data = np.repeat(a.data, times, axis=axis)

    def bwd(g):
        shape = list(a.data.shape)
        shape.insert(axis + 1, times)
        a._accumulate(g.reshape(shape).sum(axis=axis + 1))

    return _make(out_data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along `axis`."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bwd(g):
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bwd)


def softmax_vector(v) -> np.ndarray:
    """Plain-array stable softmax of a vector (no autograd)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax: non-finite input")
    e = np.exp(v - v.max())
    return e / e.sum()


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention.

    q, k, v: (..., L, d). mask: boolean (L, L); mask[i, j] False hides j
    from i. Every query row must see at least one position.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention: fully-masked query row")
    d = q.shape[-1]
    scores = matmul(q, _swap_last(k)) * (1.0 / math.sqrt(d))
    bias = np.where(mask, 0.0, -1e30)
    weights = softmax(add(scores, Tensor(bias)), axis=-1)
    return matmul(weights, v)


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = tpow(add(var, Tensor(np.full(var.shape, eps))), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


# -- Adam with warmup ---------------------------------------------------------


@dataclass
class AdamState:
    """Adam optimizer state with a linear-warmup / inverse-sqrt-decay schedule."""

    peak_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    def lr_at(self, t: int) -> float:
        return self.peak_lr * min(t / self.warmup_steps,
                                  math.sqrt(self.warmup_steps / t))


def adam_update(state: AdamState, params: dict[str, Tensor]) -> None:
    """One bias-corrected Adam step over named parameters, in place.

    Parameters with no gradient are skipped; a non-finite gradient raises
    with the offending parameter's name.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# -- finite-difference gradient checking --------------------------------------


def finite_diff_gradcheck(f: Callable[[dict[str, Tensor]], Tensor],
                          params: dict[str, Tensor],
                          h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the named parameters to a scalar Tensor. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("h must lie in [1e-7, 1e-3]")
    for p in params.values():
        p.zero_grad()
        p.requires_grad = True
    loss = f(params)
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else
                       np.zeros_like(p.data))
                for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst


# -- 1-D convolution helpers (composites over the primitives above) -----------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: int = 1) -> Tensor:
    """x: (T, Cin), w: (k, Cin, Cout). Output length floor((T+2p-k)/s)+1."""
    t = x.shape[0]
    k = w.shape[0]
    c_in = x.shape[1]
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d: input too short for kernel/stride")
    if padding:
        zeros = Tensor(np.zeros((padding, c_in)))
        x = concat([zeros, x, zeros], axis=0)
    out = None
    for j in range(k):
        tap = matmul(x[j: j + stride * (t_out - 1) + 1: stride], w[j])
        out = tap if out is None else add(out, tap)
    if b is not None:
        out = add(out, b)
    return out


def zero_stuff(x: Tensor, factor: int) -> Tensor:
    """Insert factor-1 zero rows after each row: (T, C) -> (T*factor, C)."""
    if factor == 1:
        return x
    t = x.shape[0]
    return put_rows(x, np.arange(t) * factor, t * factor)
