"""
Composite operations built only from primitives.

Nothing here defines a VJP: derivatives of any order follow from the
primitives they are made of.
"""

from typing import Literal, Optional, Sequence

import numpy as np

from gradleak.autodiff import primitives as P
from gradleak.autodiff.tensor import Tensor
from gradleak.errors import ShapeError

PaddingMode = Literal["zero", "circular"]

BN_EPS = 1e-5


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = P.as_tensor(a)
    axes = range(a.ndim) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    count = int(np.prod([a.shape[i] for i in axes])) if a.ndim else 1
    return P.scale(P.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equally shaped tensors -> shape (1,)."""
    a, b = P.as_tensor(a), P.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot needs equal shapes, got {a.shape} and {b.shape}")
    return P.sum(P.multiply(a, b))


def l2_norm(a: Tensor) -> Tensor:
    return P.sqrt(dot(a, a))


def flatten_concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate the flattened tensors into one vector."""
    return P.concat([P.reshape(t, (t.size,)) for t in tensors], axis=0)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x A^T + b for x of shape (N, in) and A of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = P.matmul(x, P.transpose(weight))
    if bias is not None:
        out = P.add(out, bias)
    return out


def pad2d(x: Tensor, padding: int, mode: PaddingMode = "zero") -> Tensor:
    """Pad the two trailing spatial axes of (N, C, H, W) by `padding` on each side."""
    if padding == 0:
        return x
    n, c, h, w = x.shape
    if mode == "zero":
        index = (np.s_[:], np.s_[:], np.s_[padding:padding + h], np.s_[padding:padding + w])
        return P.embed(x, index, (n, c, h + 2 * padding, w + 2 * padding))
    if mode == "circular":
        if padding > h or padding > w:
            raise ShapeError(f"circular padding {padding} exceeds input {h}x{w}")
        rows = P.concat([x[:, :, h - padding:, :], x, x[:, :, :padding, :]], axis=2)
        return P.concat([rows[:, :, :, w - padding:], rows, rows[:, :, :, :padding]], axis=3)
    raise ShapeError(f"unknown padding mode '{mode}'")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, mode: PaddingMode = "zero") -> Tensor:
    """2-D cross-correlation of (N, C, H, W) with (O, C, k, k) via im2col."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    out_channels, in_channels, k, _ = weight.shape
    xp = pad2d(x, padding, mode)
    n, _, h, w = xp.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cols = P.unfold(xp, k, stride)
    kernel = P.reshape(weight, (out_channels, in_channels * k * k))
    out = P.reshape(P.matmul(kernel, cols), (n, out_channels, ho, wo))
    if bias is not None:
        out = P.add(out, P.reshape(bias, (1, out_channels, 1, 1)))
    return out


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling as a constant one-hot selection; ties pick the first maximum."""
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    cols = P.unfold(P.reshape(x, (n * c, 1, h, w)), kernel, stride)
    winner = np.argmax(cols.data, axis=1)
    selector = np.zeros(cols.shape)
    np.put_along_axis(selector, winner[:, None, :], 1.0, axis=1)
    out = P.reshape(P.sum(P.multiply(cols, Tensor(selector)), axis=1), (n, c, ho, wo))
    if out.node is not None and kernel * kernel > 1:
        ranked = np.sort(cols.data, axis=1)
        # windows whose maximum is an exact zero hold dead relu outputs; they only
        # move when a relu input crosses 0, which relu reports itself
        live = ranked[:, -1] != 0.0
        gaps = (ranked[:, -1] - ranked[:, -2])[live]
        out.node.kink = float(np.min(gaps)) if gaps.size else float("inf")
    return out


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    cols = P.unfold(P.reshape(x, (n * c, 1, h, w)), kernel, stride)
    return P.reshape(mean(cols, axis=1), (n, c, ho, wo))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS) -> Tensor:
    """Training-mode batch norm over every axis except channels (axis 1)."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    centered = P.subtract(x, mean(x, axis=axes, keepdims=True))
    var = mean(P.multiply(centered, centered), axis=axes, keepdims=True)
    normed = P.divide(centered, P.sqrt(P.add(var, eps)))
    return P.add(P.multiply(normed, P.reshape(scale, view)), P.reshape(shift, view))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy over the batch -> shape (1,)."""
    return mean(P.softmax_cross_entropy(logits, labels))
