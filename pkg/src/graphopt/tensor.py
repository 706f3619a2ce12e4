"""Minimal dense-tensor math with reverse-mode autodiff.

Float64 throughout. Each forward pass builds its own tape (closures on the
output tensors), so independent forwards can run concurrently; backward()
walks one tape. Covers exactly the primitives the embedding and decision
networks need, plus an Adam optimizer and finite-difference grad checking.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; accumulates into .grad of
        every tensor on the tape (leaves keep theirs for the optimizer)."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # light operator sugar for test code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, delta: np.ndarray):
    if t.grad is None:
        t.grad = np.array(delta, dtype=np.float64)
    else:
        t.grad = t.grad + delta


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g, a.data.shape)),
                               _accum(b, _unbroadcast(g, b.data.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g, a.data.shape)),
                               _accum(b, _unbroadcast(-g, b.data.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g * b.data, a.data.shape)),
                               _accum(b, _unbroadcast(g * a.data, b.data.shape)))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, (a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: _accum(a, g * c)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val, (a,))
    out._backward = lambda g: _accum(a, g * val)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), (a,))
    out._backward = lambda g: _accum(a, g / a.data)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(val, (a,))
    out._backward = lambda g: _accum(a, g * val * (1.0 - val))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))
    out._backward = lambda g: (_accum(a, g @ b.data.T), _accum(b, a.data.T @ g))
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T, (a,))
    out._backward = lambda g: _accum(a, g.T)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    out._backward = back
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index], (a,))

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    out._backward = back
    return out


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], (a,))

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    out._backward = back
    return out


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D input."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx], (a,))

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)

    out._backward = back
    return out


def segment_max(a, segment_ids, num_segments: int) -> Tensor:
    """Per-segment elementwise max over rows of a (M x D). Empty segments
    yield zero rows. Gradient goes to the argmax row per output coordinate,
    first row on ties."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    m, dim = a.data.shape
    if seg.shape != (m,):
        raise ValueError("segment_ids must have one entry per row")
    out_val = np.zeros((num_segments, dim))
    argmax = np.full((num_segments, dim), -1, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    bounds = np.searchsorted(sorted_seg, np.arange(num_segments + 1))
    for s in range(num_segments):
        lo, hi = bounds[s], bounds[s + 1]
        if lo == hi:
            continue
        rows = order[lo:hi]
        block = a.data[rows]
        k = np.argmax(block, axis=0)  # first max per column
        out_val[s] = block[k, np.arange(dim)]
        argmax[s] = rows[k]
    out = Tensor(out_val, (a,))

    def back(g):
        full = np.zeros_like(a.data)
        mask = argmax >= 0
        rows = argmax[mask]
        cols = np.nonzero(mask)[1]
        np.add.at(full, (rows, cols), g[mask])
        _accum(a, full)

    out._backward = back
    return out


def mean_rows(a) -> Tensor:
    """Mean over rows of a 2-D tensor, kept as shape (1, D)."""
    a = as_tensor(a)
    n = a.data.shape[0]
    out = Tensor(a.data.mean(axis=0, keepdims=True), (a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g / n, a.data.shape))
    return out


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), (a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.data.shape))
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_axis(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward = back
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, (a,))

    def back(g):
        dot = (g * val).sum(axis=axis, keepdims=True)
        _accum(a, val * (g - dot))

    out._backward = back
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    val = shifted - lse
    sm = np.exp(val)
    out = Tensor(val, (a,))

    def back(g):
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    out._backward = back
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias (last axis)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + bias.data, (x, gain, bias))
    dim = x.data.shape[-1]

    def back(g):
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    out._backward = back
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller input (a on ties)."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g * take_a, a.data.shape)),
                               _accum(b, _unbroadcast(g * ~take_a, b.data.shape)))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclipped region."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), (a,))
    out._backward = lambda g: _accum(a, g * inside)
    return out


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.copy())


def affine(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v; optional additive mask on the scores."""
    dk = as_tensor(q).data.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dk))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


class ParamStore:
    """Named parameter tensors with Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def num_values(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.items() if n.startswith(prefix))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        """Standard Adam with bias correction; clears gradients afterwards."""
        self.step_count += 1
        t = self.step_count
        for name in self.names():
            p = self._params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self._m[name] = beta1 * self._m[name] + (1 - beta1) * g
            self._v[name] = beta2 * self._v[name] + (1 - beta2) * g * g
            mhat = self._m[name] / (1 - beta1**t)
            vhat = self._v[name] / (1 - beta2**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
            p.grad = None

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self.items():
            other.add(name, t.data.copy())
            other._m[name] = self._m[name].copy()
            other._v[name] = self._v[name].copy()
        other.step_count = self.step_count
        return other

    def copy_values_from(self, other: "ParamStore"):
        for name, t in other.items():
            self._params[name].data = t.data.copy()

    def save(self, path: str | Path):
        np.savez(path, **{n: t.data for n, t in self.items()})

    def load(self, path: str | Path):
        with np.load(path) as data:
            for name in data.files:
                if name in self._params:
                    self._params[name].data = np.array(data[name], dtype=np.float64)
                else:
                    self.add(name, data[name])


def adam_step(store: ParamStore, hyper: dict | None = None):
    """Module-level convenience around ParamStore.adam_step."""
    hyper = hyper or {}
    store.adam_step(
        lr=hyper.get("lr", 1e-3),
        beta1=hyper.get("beta1", 0.9),
        beta2=hyper.get("beta2", 0.999),
        eps=hyper.get("eps", 1e-8),
    )


def grad_check(fn, inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a scalar-valued fn over the given input point."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar output")
    out.backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        x = np.array(x, dtype=np.float64)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            xp = flat.copy()
            xp[j] += h
            xm = flat.copy()
            xm[j] -= h
            args_p = [np.array(v, dtype=np.float64) for v in inputs]
            args_m = [np.array(v, dtype=np.float64) for v in inputs]
            args_p[i] = xp.reshape(x.shape)
            args_m[i] = xm.reshape(x.shape)
            fp = float(fn(*[Tensor(v) for v in args_p]).data)
            fm = float(fn(*[Tensor(v) for v in args_m]).data)
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
