"""
The closed set of differentiable primitives.

Each primitive computes its value with numpy and registers a VJP that only
calls primitives from this module. That closure is what makes second-order
derivatives (gradient of a gradient) work: the backward pass is recorded on
the tape like any forward computation.

Masks used by piecewise-linear primitives (relu, abs, clamp) are constants;
their derivative is zero almost everywhere.
"""

from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from gradleak.autodiff.tensor import Tensor, make
from gradleak.errors import ShapeError

Index = Tuple[Union[slice, int], ...]


def as_tensor(value: Any) -> Tensor:
    """Wrap numbers/arrays as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- Structural primitives ---

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    in_shape = a.shape

    def vjp(g, out, needs):
        return (reshape(g, in_shape),)

    return make("reshape", value, (a,), vjp)


def flatten(a: Tensor, start: int = 1) -> Tensor:
    """Collapse all dimensions from `start` on."""
    a = as_tensor(a)
    lead = a.shape[:start]
    return reshape(a, lead + (int(np.prod(a.shape[start:])),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g, out, needs):
        return (transpose(g, inverse),)

    return make("transpose", np.transpose(a.data, axes).copy(), (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from e
    in_shape = a.shape

    def vjp(g, out, needs):
        return (sum_to(g, in_shape),)

    return make("broadcast_to", value, (a,), vjp)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Sum over `axis`; a full reduction yields shape (1,)."""
    a = as_tensor(a)
    in_shape = a.shape
    axes = _normalize_axes(axis, a.ndim)
    if axis is None:
        value = np.sum(a.data).reshape(1)
    else:
        value = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else d for i, d in enumerate(in_shape))

    def vjp(g, out, needs):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return make("sum", value, (a,), vjp)


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Reduce a broadcast result back to `shape` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and a.shape[lead + i] != 1
    )
    if not axes:
        return reshape(a, shape)
    return reshape(sum(a, axis=axes, keepdims=True), shape)


def slice(a: Tensor, index: Index) -> Tensor:  # noqa: A001
    """Basic indexing; integer arrays are allowed when their entries are unique."""
    a = as_tensor(a)
    index = tuple(index)
    in_shape = a.shape

    def vjp(g, out, needs):
        return (embed(g, index, in_shape),)

    return make("slice", a.data[index].copy(), (a,), vjp)


def embed(a: Tensor, index: Index, shape: Sequence[int]) -> Tensor:
    """Zeros of `shape` with `a` written at `index` (adjoint of slice)."""
    a = as_tensor(a)
    index = tuple(index)
    value = np.zeros(tuple(shape))
    try:
        value[index] = a.data
    except ValueError as e:
        raise ShapeError(f"cannot embed {a.shape} into {tuple(shape)} at {index}") from e

    def vjp(g, out, needs):
        return (slice(g, index),)

    return make("embed", value, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, out, needs):
        grads = []
        for k, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            index = [np.s_[:]] * ndim
            index[axis] = np.s_[int(bounds[k]):int(bounds[k + 1])]
            grads.append(slice(g, tuple(index)))
        return tuple(grads)

    return make("concat", value, tuple(tensors), vjp)


def _out_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def unfold(a: Tensor, kernel: int, stride: int = 1) -> Tensor:
    """im2col: (N, C, H, W) -> (N, C*k*k, Ho*Wo), channel-major then kernel row/col."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"unfold expects (N, C, H, W), got {a.shape}")
    n, c, h, w = a.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"kernel {kernel} larger than input {h}x{w}")
    ho, wo = _out_size(h, kernel, stride), _out_size(w, kernel, stride)
    cols = np.empty((n, c, kernel, kernel, ho, wo))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = a.data[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    in_shape = a.shape

    def vjp(g, out, needs):
        return (fold(g, in_shape, kernel, stride),)

    return make("unfold", cols.reshape(n, c * kernel * kernel, ho * wo), (a,), vjp)


def fold(a: Tensor, shape: Sequence[int], kernel: int, stride: int = 1) -> Tensor:
    """col2im with overlap summation (adjoint of unfold)."""
    a = as_tensor(a)
    n, c, h, w = shape
    ho, wo = _out_size(h, kernel, stride), _out_size(w, kernel, stride)
    cols = a.data.reshape(n, c, kernel, kernel, ho, wo)
    value = np.zeros((n, c, h, w))
    for i in range(kernel):
        for j in range(kernel):
            value[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]

    def vjp(g, out, needs):
        return (unfold(g, kernel, stride),)

    return make("fold", value, (a,), vjp)


# --- Arithmetic ---

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return make("add", a.data + b.data, (a, b), vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(negate(g), b.shape) if needs[1] else None)

    return make("subtract", a.data - b.data, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out, needs):
        return (sum_to(multiply(g, b), a.shape) if needs[0] else None,
                sum_to(multiply(g, a), b.shape) if needs[1] else None)

    return make("multiply", a.data * b.data, (a, b), vjp)


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out, needs):
        ga = sum_to(divide(g, b), a.shape) if needs[0] else None
        gb = sum_to(negate(divide(multiply(g, out), b)), b.shape) if needs[1] else None
        return ga, gb

    return make("divide", a.data / b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def vjp(g, out, needs):
        return (scale(g, c),)

    return make("scale", a.data * c, (a,), vjp)


def negate(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g, out, needs):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return make("matmul", np.matmul(a.data, b.data), (a, b), vjp)


# --- Nonlinearities ---

def relu(a: Tensor) -> Tensor:
    """max(a, 0) with derivative 0 at the kink."""
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def vjp(g, out, needs):
        return (multiply(g, mask),)

    kink = float(np.min(np.abs(a.data))) if a.size else None
    return make("relu", a.data * mask.data, (a,), vjp, kink=kink)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def vjp(g, out, needs):
        return (multiply(g, multiply(out, subtract(1.0, out))),)

    return make("sigmoid", value, (a,), vjp)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    """|a| with derivative sign(a), i.e. 0 at 0."""
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))

    def vjp(g, out, needs):
        return (multiply(g, sign),)

    kink = float(np.min(np.abs(a.data))) if a.size else None
    return make("abs", np.abs(a.data), (a,), vjp, kink=kink)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.data)

    def vjp(g, out, needs):
        return (divide(g, scale(out, 2.0)),)

    return make("sqrt", value, (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))

    def vjp(g, out, needs):
        return (multiply(g, mask),)

    kink = float(min(np.min(np.abs(a.data - lo)), np.min(np.abs(a.data - hi)))) if a.size else None
    return make("clamp", np.clip(a.data, lo, hi), (a,), vjp, kink=kink)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g, out, needs):
        inner = sum(multiply(g, out), axis=axis, keepdims=True)
        return (multiply(out, subtract(g, inner)),)

    return make("softmax", value, (a,), vjp)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-sample cross-entropy of (N, K) logits against integer labels -> shape (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in 0..{k - 1}")
    z = logits.data
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    value = lse - z[np.arange(n), labels]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    onehot = Tensor(onehot)

    def vjp(g, out, needs):
        residual = subtract(softmax(logits, axis=1), onehot)
        return (multiply(reshape(g, (n, 1)), residual),)

    return make("softmax_cross_entropy", value, (logits,), vjp)


def _install_operators() -> None:
    """Arithmetic operators on Tensor dispatch to the primitives above."""

    def _mul(a, b):
        if isinstance(b, (int, float)):
            return scale(a, b)
        return multiply(a, b)

    Tensor.__add__ = lambda a, b: add(a, b)
    Tensor.__radd__ = lambda a, b: add(b, a)
    Tensor.__sub__ = lambda a, b: subtract(a, b)
    Tensor.__rsub__ = lambda a, b: subtract(b, a)
    Tensor.__mul__ = _mul
    Tensor.__rmul__ = _mul
    Tensor.__truediv__ = lambda a, b: (scale(a, 1.0 / b) if isinstance(b, (int, float))
                                       else divide(a, b))
    Tensor.__rtruediv__ = lambda a, b: divide(b, a)
    Tensor.__neg__ = lambda a: negate(a)
    Tensor.__matmul__ = lambda a, b: matmul(a, b)
    Tensor.__rmatmul__ = lambda a, b: matmul(b, a)
    Tensor.__getitem__ = lambda a, index: slice(a, index if isinstance(index, tuple) else (index,))
    Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and
                                               isinstance(shape[0], (tuple, list)) else shape)
    Tensor.sum = lambda a, axis=None, keepdims=False: sum(a, axis=axis, keepdims=keepdims)
    Tensor.T = property(lambda a: transpose(a))


_install_operators()
