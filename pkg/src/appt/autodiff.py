"""Dense float64 tensors with reverse-mode differentiation.

Everything is numpy-backed but deliberately avoids BLAS matmul: the matmul
kernel accumulates over the inner index k in ascending order, so its result
is bit-identical to the naive triple loop. That fixed reduction order is
what lets the permutation-equivariance and oracle tests in this repository
assert at tight tolerances.

The computation graph is recorded on the tensors themselves: every
operation stores its parents and a closure mapping the output gradient to
parent gradients. `backward(out, seed)` replays the graph in reverse
topological order and accumulates gradients on every tensor that requires
them. Gradients accumulate across calls until explicitly zeroed.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, RangeError, StateError

Array = np.ndarray


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor constructed with non-finite entries")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: Array, parents: Sequence["Tensor"],
                 grad_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # small operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# kernels


def _mm_ordered(a: Array, b: Array) -> Array:
    """a (p,q) @ b (q,r), accumulated in ascending k; bitwise equal to the
    naive triple loop."""
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for k in range(q):
        out += a[:, k, None] * b[None, k, :]
    return out


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural operations


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), grad_fn)


def scale(a, factor: float) -> Tensor:
    a = _wrap(a)
    f = float(factor)
    data = a.data * f

    def grad_fn(g):
        return (g * f,)

    return Tensor._from_op(data, (a,), grad_fn)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return Tensor._from_op(data, (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(data, (a,), grad_fn)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")
    data = a.data.T

    def grad_fn(g):
        return (g.T,)

    return Tensor._from_op(data, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    data = _mm_ordered(a.data, b.data)

    def grad_fn(g):
        # deterministic single-threaded C loops; the ascending-k contract is
        # on the forward product, gradients only need determinism
        da = np.einsum("nj,kj->nk", g, b.data, optimize=False)
        db = np.einsum("nk,nj->kj", a.data, g, optimize=False)
        return da, db

    return Tensor._from_op(data, (a, b), grad_fn)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise DimensionError(
            f"concat_cols row counts differ: {[t.data.shape for t in tensors]}")
    data = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(data, tensors, grad_fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    data = a.data[:, start:stop]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return Tensor._from_op(data, (a,), grad_fn)


def gather_rows(a, index) -> Tensor:
    """out[i...] = a[index[i...]]; backward scatter-adds into the source."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RangeError(
            f"gather index out of range [0, {n}): min {idx.min()}, max {idx.max()}")
    data = a.data[idx]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._from_op(data, (a,), grad_fn)


def sum_along(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._from_op(data, (a,), grad_fn)


def max_along(a, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first occurrence of the max."""
    a = _wrap(a)
    am = a.data.argmax(axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(am, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return Tensor._from_op(data, (a,), grad_fn)


def softmax(a, axis: int) -> Tensor:
    """Stabilized softmax along `axis`; slices sum to 1 within 1e-12."""
    a = _wrap(a)
    nd = a.data.ndim
    if not (-nd <= axis < nd):
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    if a.data.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return Tensor._from_op(data, (a,), grad_fn)


def log_softmax(a, axis: int) -> Tensor:
    a = _wrap(a)
    if a.data.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def grad_fn(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(data, (a,), grad_fn)


def channel_norm(a, norm_scale, norm_shift, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis with learned scale/shift."""
    a, norm_scale, norm_shift = _wrap(a), _wrap(norm_scale), _wrap(norm_shift)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * norm_scale.data + norm_shift.data

    def grad_fn(g):
        dxhat = g * norm_scale.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dscale = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        return dx, dscale, dshift

    return Tensor._from_op(data, (a, norm_scale, norm_shift), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, seed_grad) -> None:
    """Accumulate d(sum(seed ⊙ output))/dθ into .grad of every tensor in the
    recorded graph that requires gradients."""
    if not output.requires_grad:
        raise StateError("backward called without a recorded forward computation")
    seed = seed_grad.data if isinstance(seed_grad, Tensor) else _as_array(seed_grad)
    if seed.shape != output.data.shape:
        raise DimensionError(
            f"seed gradient shape {seed.shape} != output shape {output.data.shape}")

    order = _topo_order(output)
    # grad_fns may hand back views or the incoming gradient itself, so a
    # stored array is only mutated in place once this pass owns it
    local: dict[int, Array] = {id(output): seed.astype(np.float64, copy=True)}
    owned: set[int] = {id(output)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        owned.discard(id(node))
        if g is None:
            continue
        if node.grad is not None:
            node.grad += g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = local.get(pid)
            if acc is None:
                local[pid] = pg
            elif pid in owned:
                acc += pg
            else:
                local[pid] = acc + pg
                owned.add(pid)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f, params, h: float = 1e-5) -> dict:
    """Central-difference gradient of scalar f(params) per parameter entry.

    Mutates each entry in place by ±h and restores it; f must be a
    deterministic pure function of the store.
    """
    if not h > 0:
        raise RangeError(f"finite difference step must be positive, got {h}")
    grads = {}
    for name, param in params.items():
        flat = param.data.reshape(-1)
        out = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(params))
            flat[j] = orig - h
            fm = float(f(params))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"non-finite evaluation while differencing {name}[{j}]")
            out[j] = (fp - fm) / (2.0 * h)
        grads[name] = out.reshape(param.data.shape)
    return grads


def gradient_rel_error(analytic: Array, estimate: Array) -> float:
    """max|a-e| scaled by the larger gradient magnitude.

    When both gradients vanish (structurally zero derivative, e.g. through
    a shift-invariant softmax) the relative error is 0/0; the absolute
    difference is reported instead, which is the finite-difference noise
    floor.
    """
    scale_ = max(np.abs(analytic).max(initial=0.0),
                 np.abs(estimate).max(initial=0.0))
    diff = float(np.abs(analytic - estimate).max(initial=0.0))
    if scale_ < 1e-6:
        return diff
    return diff / scale_
