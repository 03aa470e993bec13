"""Reverse-mode automatic differentiation over numpy float64 arrays.

Every operation records its inputs and a backward closure on the output
tensor; ``backward()`` on a scalar walks the recorded graph in reverse
topological order and accumulates dLoss/dLeaf into each requires_grad leaf.
The graph is implicit in the parent links and is rebuilt on every forward
pass (define-by-run). All arithmetic is double precision so that central
finite differences are a meaningful oracle for the analytic gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigError,
    ContractError,
    DeterminismError,
    LabelError,
    MaskError,
    ShapeError,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array participating in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._backward_ran = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate dSelf/dLeaf for every requires_grad leaf in the graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise ContractError(
                "backward() already ran on this graph; rebuild the forward pass "
                "before differentiating again (grads would silently accumulate)"
            )
        if not self.requires_grad:
            raise ContractError("loss does not depend on any requires_grad tensor")
        self._backward_ran = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return _make(data, (a,), backward)


def clip_min(a: Tensor, floor: float) -> Tensor:
    data = np.maximum(a.data, floor)

    def backward(g):
        a._accumulate(g * (a.data > floor))

    return _make(data, (a,), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if axis < 0 or axis >= a.ndim:
        raise ShapeError(f"narrow axis {axis} invalid for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for shape {a.shape}")
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    data = a.data[index].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, extent in zip(tensors, extents):
            index = tuple(
                slice(None) if i != axis else slice(offset, offset + extent)
                for i in range(g.ndim)
            )
            t._accumulate(g[index])
            offset += extent

    return _make(data, tuple(tensors), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """x @ w^T + b for x (n, in), w (out, in), b (out,) or absent."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine shape mismatch: {x.shape} x {w.shape}^T")
    data = x.data @ w.data.T
    if b is not None:
        data += b.data

    def backward(g):
        x._accumulate(g @ w.data)
        w._accumulate(g.T @ x.data)
        if b is not None:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B, m, k) x (B, k, n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        a._accumulate(np.matmul(g, b.data.transpose(0, 2, 1)))
        b._accumulate(np.matmul(a.data.transpose(0, 2, 1), g))

    return _make(data, (a, b), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


# -- nonlinearities ---------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        a._accumulate(g * (cdf + a.data * pdf))

    return _make(data, (a,), backward)


# -- convolutions ------------------------------------------------------------------


def convolve(x: Tensor, kernel: Tensor, mode: str) -> Tensor:
    """Cross-correlation in one of three modes.

    pointwise:    kernel (c_out, c_in) applied along the leading axis of x.
    depthwise3x3: kernel (c, 3, 3), one kernel per channel of x (c, H, W),
                  zero same-padding.
    conv3d:       kernel (v, 3, 3, 3), one kernel per volume of x (v, B, H, W),
                  zero same-padding over (band, row, col).
    """
    if mode == "pointwise":
        return _conv_pointwise(x, kernel)
    if mode == "depthwise3x3":
        return _conv_depthwise3x3(x, kernel)
    if mode == "conv3d":
        return _conv3d(x, kernel)
    raise ConfigError(f"mode: unknown convolution mode {mode!r}")


def _conv_pointwise(x: Tensor, kernel: Tensor) -> Tensor:
    if kernel.ndim != 2 or x.ndim < 1 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise kernel {kernel.shape} incompatible with input {x.shape}")
    data = np.tensordot(kernel.data, x.data, axes=([1], [0]))
    rest_axes = tuple(range(1, x.ndim))

    def backward(g):
        kernel._accumulate(np.tensordot(g, x.data, axes=(rest_axes, rest_axes)))
        x._accumulate(np.tensordot(kernel.data.T, g, axes=([1], [0])))

    return _make(data, (x, kernel), backward)


def _conv_depthwise3x3(x: Tensor, kernel: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"depthwise3x3 expects (c, H, W) input, got {x.shape}")
    if kernel.shape != (x.shape[0], 3, 3):
        raise ShapeError(f"depthwise3x3 kernel {kernel.shape} incompatible with input {x.shape}")
    c, h, w = x.shape
    pad = np.zeros((c, h + 2, w + 2))
    pad[:, 1:-1, 1:-1] = x.data
    data = np.zeros((c, h, w))
    for di in range(3):
        for dj in range(3):
            data += kernel.data[:, di, dj, None, None] * pad[:, di : di + h, dj : dj + w]

    def backward(g):
        gk = np.empty_like(kernel.data)
        gpad = np.zeros_like(pad)
        for di in range(3):
            for dj in range(3):
                window = pad[:, di : di + h, dj : dj + w]
                gk[:, di, dj] = (g * window).sum(axis=(1, 2))
                gpad[:, di : di + h, dj : dj + w] += kernel.data[:, di, dj, None, None] * g
        kernel._accumulate(gk)
        x._accumulate(gpad[:, 1:-1, 1:-1])

    return _make(data, (x, kernel), backward)


def _conv3d(x: Tensor, kernel: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv3d expects (v, B, H, W) input, got {x.shape}")
    if kernel.shape != (x.shape[0], 3, 3, 3):
        raise ShapeError(f"conv3d kernel {kernel.shape} incompatible with input {x.shape}")
    v, b, h, w = x.shape
    pad = np.zeros((v, b + 2, h + 2, w + 2))
    pad[:, 1:-1, 1:-1, 1:-1] = x.data
    data = np.zeros((v, b, h, w))
    for db in range(3):
        for di in range(3):
            for dj in range(3):
                data += (
                    kernel.data[:, db, di, dj, None, None, None]
                    * pad[:, db : db + b, di : di + h, dj : dj + w]
                )

    def backward(g):
        gk = np.empty_like(kernel.data)
        gpad = np.zeros_like(pad)
        for db in range(3):
            for di in range(3):
                for dj in range(3):
                    window = pad[:, db : db + b, di : di + h, dj : dj + w]
                    gk[:, db, di, dj] = (g * window).sum(axis=(1, 2, 3))
                    gpad[:, db : db + b, di : di + h, dj : dj + w] += (
                        kernel.data[:, db, di, dj, None, None, None] * g
                    )
        kernel._accumulate(gk)
        x._accumulate(gpad[:, 1:-1, 1:-1, 1:-1])

    return _make(data, (x, kernel), backward)


# -- batch normalization -------------------------------------------------------------


class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.size


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize x[N, C, ...] per channel; batch stats in training mode."""
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects (N, {state.channels}, ...) input, got {x.shape}")
    stat_axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    gamma = reshape(state.gamma, bshape)
    beta = reshape(state.beta, bshape)
    if training:
        mu = tmean(x, axis=stat_axes, keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=stat_axes, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(-1)
        # variance floored at eps keeps the zero-variance batch defined
        scale = div(centered, tsqrt(clip_min(var, state.eps)))
    else:
        mean = Tensor(state.running_mean.reshape(bshape))
        std = Tensor(np.sqrt(np.maximum(state.running_var.reshape(bshape), state.eps)))
        scale = div(sub(x, mean), std)
    return add(mul(gamma, scale), beta)


# -- losses -----------------------------------------------------------------------------


def mse_masked(pred: Tensor, target: Tensor, mask) -> Tensor:
    """Mean squared error over masked elements only (mask entry 1 = counted)."""
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"mse_masked needs equal shapes, got pred {pred.shape}, "
            f"target {target.shape}, mask {mask.shape}"
        )
    count = mask.sum()
    if count == 0:
        raise MaskError("mse_masked needs at least one masked element")
    diff = pred.data - target.data
    data = np.asarray(((diff * diff) * mask).sum() / count)

    def backward(g):
        scaled = (2.0 / count) * g * mask * diff
        pred._accumulate(scaled)
        target._accumulate(-scaled)

    return _make(data, (pred, target), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class, stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy expects (N, L) logits and N labels, got {logits.shape} and {labels.shape}")
    n, classes = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise LabelError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    data = np.asarray((lse - z[np.arange(n), labels]).mean())

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate((float(g) / n) * p)

    return _make(data, (logits,), backward)


# -- gradient checking ----------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    """Per-input maximum relative error of analytic vs central-difference grads."""

    per_input: tuple[float, ...]
    max_rel_err: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], epsilon: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of scalar f(*inputs) against central differences.

    Relative error per coordinate uses a max(|analytic|, |numeric|, 1e-12)
    denominator. f must be deterministic; two baseline evaluations that
    disagree raise DeterminismError.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon: must lie in [1e-7, 1e-3], got {epsilon}")
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must have requires_grad=True")

    with no_grad():
        base_a = f(*inputs).item()
        base_b = f(*inputs).item()
    if base_a != base_b:
        raise DeterminismError(f"f evaluated twice gave {base_a} and {base_b}")

    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check expects a scalar function, got output shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    per_input = []
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            worst = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                fp = f(*inputs).item()
                flat[j] = orig - epsilon
                fm = f(*inputs).item()
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * epsilon)
                a_j = a.reshape(-1)[j]
                rel = abs(a_j - numeric) / max(abs(a_j), abs(numeric), 1e-12)
                worst = max(worst, rel)
            per_input.append(worst)
    return GradCheckReport(tuple(per_input), max(per_input) if per_input else 0.0)
