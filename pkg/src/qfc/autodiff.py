"""Minimal dense-tensor reverse-mode automatic differentiation.

Float64 numpy arrays with a dynamically recorded tape. Every primitive
registers a closure that accumulates into ``grad`` of its parents;
``backward`` walks the tape once in reverse topological order. Wrap
inference code in ``no_grad()`` to skip tape recording entirely.

Conventions fixed here because they change test vectors: softmax
subtracts the row max before exponentiation; layer_norm uses the 1/N
variance and eps = 1e-5 inside the square root; relu takes derivative 0
at exactly 0.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:  # scalar/broadcast edge
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._backward is None and not self._parents and not self.requires_grad:
            raise ValueError("backward on a tensor disconnected from the tape")
        if self._parents and self._backward is None:
            raise RuntimeError("repeated backward on a consumed tape")
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
            if node._backward is not None:
                if node.grad is None:
                    raise RuntimeError("repeated backward on a consumed tape")
                node._backward(node.grad)
                node._backward = None  # tape is single-use
        return self

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _tracked(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad or p._parents for p in parents)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitives --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def backward(g):
        gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        bias._accumulate(_unbroadcast(g, bias.shape))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv)

    return _make(out_data, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise ValueError("embedding index out of range")
    out_data = table.data[idx]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(out_data, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (materialized: keeps matmul on the fast path)."""
    out_data = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(out_data, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))

    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean negative log-softmax of the target class over all leading dims."""
    idx = np.asarray(target_index, dtype=np.int64)
    if idx.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {idx.shape} != logits leading {logits.shape[:-1]}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat = logp.reshape(-1, logits.shape[-1])
    picked = flat[np.arange(flat.shape[0]), idx.reshape(-1)]
    n = max(picked.size, 1)
    out_data = np.array(-picked.sum() / n)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p.reshape(-1, p.shape[-1]))
        onehot[np.arange(onehot.shape[0]), idx.reshape(-1)] = 1.0
        gx = (p.reshape(-1, p.shape[-1]) - onehot).reshape(logits.data.shape)
        logits._accumulate(gx * (float(g) / n))

    return _make(out_data, (logits,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (evaluation) or p == 0."""
    if rng is None or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)

    def backward(g):
        a._accumulate(g * keep)

    return _make(a.data * keep, (a,), backward)


# -- verification harness ----------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    n_coords: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    f rebuilds the scalar loss from the current parameter values; a fresh
    tape is recorded per evaluation. Coordinates are sampled per
    parameter (all of them when the parameter is small).
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            fp = f().item()
            flat[i] = keep - h
            fm = f().item()
            flat[i] = keep
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1e-8, abs(num))
            worst = max(worst, err)
    return worst
