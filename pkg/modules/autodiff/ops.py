"""
Primitive operations.

Every primitive pairs a numpy forward with a vector-Jacobian product written
in terms of other primitives. Because backward passes are themselves recorded
operations, gradients can be differentiated again. The convolution family
(conv2d, its input adjoint and its weight adjoint) is closed under this rule,
as are the pooling/unpooling and broadcast/sum-to pairs.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import current_graph
from .tensor import NumericalError, ShapeError, Tensor

Axis = Union[None, int, Tuple[int, ...]]
Grads = Tuple[Optional[Tensor], ...]


class Primitive:
    """A named forward function with its vector-Jacobian product."""

    def __init__(self, name: str, forward: Callable[..., np.ndarray], vjp: Callable[..., Grads]):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __call__(self, *inputs: Tensor, **meta) -> Tensor:
        values = self.forward(*(t.data for t in inputs), **meta)
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"{self.name} produced non-finite values")
        output = Tensor._wrap(values)
        graph = current_graph()
        if graph is not None and any(graph.tracks(t) for t in inputs):
            graph.record(self, inputs, output, meta)
        return output

    def __repr__(self) -> str:
        return f"Primitive({self.name})"


def _normalize_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape: Tuple[int, ...], axis: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(1 if i in axis else s for i, s in enumerate(shape))


def _sum_to_array(x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot sum shape {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, size in enumerate(shape) if size == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# Shape plumbing


def _broadcast_to_vjp(args, out, g, needed, shape):
    return (sum_to(g, args[0].shape),)


def _sum_to_vjp(args, out, g, needed, shape):
    return (broadcast_to(g, args[0].shape),)


_broadcast_to = Primitive("broadcast_to", lambda x, shape: np.broadcast_to(x, shape).copy(), _broadcast_to_vjp)
_sum_to = Primitive("sum_to", lambda x, shape: _sum_to_array(x, shape), _sum_to_vjp)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    return _broadcast_to(x, shape=shape)


def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _sum_to(x, shape=shape)


def _reshape_vjp(args, out, g, needed, shape):
    return (reshape(g, args[0].shape),)


_reshape = Primitive("reshape", lambda x, shape: x.reshape(shape), _reshape_vjp)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _reshape(x, shape=shape)


def _transpose_vjp(args, out, g, needed):
    return (transpose(g),)


_transpose = Primitive("transpose", lambda x: x.T, _transpose_vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _transpose(x)


def _reduce_sum_vjp(args, out, g, needed, axis, keepdims):
    x = args[0]
    g = reshape(g, _keepdims_shape(x.shape, axis))
    return (broadcast_to(g, x.shape),)


_reduce_sum = Primitive(
    "reduce_sum", lambda x, axis, keepdims: x.sum(axis=axis, keepdims=keepdims), _reduce_sum_vjp
)


def reduce_sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return _reduce_sum(x, axis=_normalize_axis(axis, x.ndim), keepdims=keepdims)


def reduce_mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def _expand_reduced(t: Tensor, shape: Tuple[int, ...], axis: Tuple[int, ...], keepdims: bool) -> Tensor:
    if not keepdims:
        t = reshape(t, _keepdims_shape(shape, axis))
    return broadcast_to(t, shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _add_vjp(args, out, g, needed):
    a, b = args
    return (sum_to(g, a.shape) if needed[0] else None, sum_to(g, b.shape) if needed[1] else None)


def _subtract_vjp(args, out, g, needed):
    a, b = args
    return (sum_to(g, a.shape) if needed[0] else None, sum_to(scale(g, -1.0), b.shape) if needed[1] else None)


def _multiply_vjp(args, out, g, needed):
    a, b = args
    return (
        sum_to(multiply(g, b), a.shape) if needed[0] else None,
        sum_to(multiply(g, a), b.shape) if needed[1] else None,
    )


def _divide_vjp(args, out, g, needed):
    a, b = args
    grad_a = sum_to(divide(g, b), a.shape) if needed[0] else None
    grad_b = sum_to(scale(divide(multiply(g, out), b), -1.0), b.shape) if needed[1] else None
    return (grad_a, grad_b)


def _divide_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.any(b == 0):
        raise NumericalError("divide: division by zero")
    return a / b


_add = Primitive("add", np.add, _add_vjp)
_subtract = Primitive("subtract", np.subtract, _subtract_vjp)
_multiply = Primitive("multiply", np.multiply, _multiply_vjp)
_divide = Primitive("divide", _divide_forward, _divide_vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _add(a, b)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "subtract")
    return _subtract(a, b)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "multiply")
    return _multiply(a, b)


def divide(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "divide")
    return _divide(a, b)


def _scale_vjp(args, out, g, needed, factor):
    return (scale(g, factor),)


_scale = Primitive("scale", lambda x, factor: x * factor, _scale_vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    return _scale(x, factor=float(factor))


def _exp_vjp(args, out, g, needed):
    return (multiply(g, out),)


def _log_forward(x: np.ndarray) -> np.ndarray:
    if np.any(x <= 0):
        raise NumericalError("log: non-positive input")
    return np.log(x)


def _log_vjp(args, out, g, needed):
    return (divide(g, args[0]),)


exp = Primitive("exp", np.exp, _exp_vjp)
log = Primitive("log", _log_forward, _log_vjp)


def _relu_vjp(args, out, g, needed):
    # Derivative at exactly 0 is 0; the mask is a constant so relu'' == 0.
    mask = Tensor._wrap((args[0].data > 0).astype(np.float64))
    return (multiply(g, mask),)


relu = Primitive("relu", lambda x: np.maximum(x, 0.0), _relu_vjp)


def _safe_reciprocal_forward(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    np.divide(1.0, x, out=out, where=x != 0)
    return out


def _safe_reciprocal_vjp(args, out, g, needed):
    return (scale(multiply(g, multiply(out, out)), -1.0),)


safe_reciprocal = Primitive("safe_reciprocal", _safe_reciprocal_forward, _safe_reciprocal_vjp)
"""1/x with 1/0 defined as 0 (and a zero derivative there)."""


# ---------------------------------------------------------------------------
# Linear algebra and norms


def _matmul_vjp(args, out, g, needed):
    a, b = args
    return (
        matmul(g, transpose(b)) if needed[0] else None,
        matmul(transpose(a), g) if needed[1] else None,
    )


_matmul = Primitive("matmul", np.matmul, _matmul_vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _matmul(a, b)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return reduce_sum(multiply(a, b))


def _l2_norm_vjp(args, out, g, needed, axis, keepdims):
    x = args[0]
    g = _expand_reduced(g, x.shape, axis, keepdims)
    inv = _expand_reduced(safe_reciprocal(out), x.shape, axis, keepdims)
    # Subgradient 0 at the origin comes from safe_reciprocal(0) == 0.
    return (multiply(g, multiply(x, inv)),)


_l2_norm = Primitive(
    "l2_norm",
    lambda x, axis, keepdims: np.sqrt(np.sum(x * x, axis=axis, keepdims=keepdims)),
    _l2_norm_vjp,
)


def l2_norm(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return _l2_norm(x, axis=_normalize_axis(axis, x.ndim), keepdims=keepdims)


def cosine_similarity(a: Tensor, b: Tensor, axis: Axis = -1) -> Tensor:
    """Cosine similarity along ``axis``; 0 when either side is the zero vector."""
    if a.shape != b.shape:
        _broadcast_shape(a, b, "cosine_similarity")
        shape = np.broadcast_shapes(a.shape, b.shape)
        a, b = broadcast_to(a, shape), broadcast_to(b, shape)
    numerator = reduce_sum(multiply(a, b), axis)
    inv = multiply(safe_reciprocal(l2_norm(a, axis)), safe_reciprocal(l2_norm(b, axis)))
    return multiply(numerator, inv)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,) or np.any(labels < 0) or np.any(labels >= classes):
        raise ShapeError(f"labels must be {batch} indices below {classes}")
    shift = Tensor._wrap(logits.data.max(axis=1, keepdims=True))
    log_sum = add(log(reduce_sum(exp(subtract(logits, shift)), axis=1)), reshape(shift, (batch,)))
    onehot = Tensor._wrap(np.eye(classes)[labels])
    picked = reduce_sum(multiply(logits, onehot), axis=1)
    return scale(reduce_sum(subtract(log_sum, picked)), 1.0 / batch)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Convolution family


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    batch, channels, height, width = x.shape
    out_h = conv_output_size(height, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((batch, channels, kh, kw, out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(batch, channels * kh * kw, out_h * out_w), out_h, out_w


def _col2im(cols: np.ndarray, x_shape: Tuple[int, ...], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    batch, channels, height, width = x_shape
    out_h = conv_output_size(height, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)
    cols = cols.reshape(batch, channels, kh, kw, out_h, out_w)
    padded = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return padded[:, :, pad:pad + height, pad:pad + width]


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    out_channels, _, kh, kw = w.shape
    cols, out_h, out_w = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(out_channels, -1), cols)
    return out.reshape(x.shape[0], out_channels, out_h, out_w)


def _conv2d_input_grad_forward(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    out_channels, _, kh, kw = w.shape
    g2 = g.reshape(g.shape[0], out_channels, -1)
    cols = np.matmul(w.reshape(out_channels, -1).T, g2)
    return _col2im(cols, x_shape, kh, kw, stride, pad)


def _conv2d_weight_grad_forward(x: np.ndarray, g: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    out_channels, _, kh, kw = w_shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g2 = g.reshape(g.shape[0], out_channels, -1)
    return np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w_shape)


def _conv2d_vjp(args, out, g, needed, stride, pad):
    x, w = args
    return (
        conv2d_input_grad(g, w, x.shape, stride, pad) if needed[0] else None,
        conv2d_weight_grad(x, g, w.shape, stride, pad) if needed[1] else None,
    )


def _conv2d_input_grad_vjp(args, out, u, needed, x_shape, stride, pad):
    g, w = args
    return (
        conv2d(u, w, stride, pad) if needed[0] else None,
        conv2d_weight_grad(u, g, w.shape, stride, pad) if needed[1] else None,
    )


def _conv2d_weight_grad_vjp(args, out, u, needed, w_shape, stride, pad):
    x, g = args
    return (
        conv2d_input_grad(g, u, x.shape, stride, pad) if needed[0] else None,
        conv2d(x, u, stride, pad) if needed[1] else None,
    )


_conv2d = Primitive("conv2d", _conv2d_forward, _conv2d_vjp)
_conv2d_input_grad = Primitive("conv2d_input_grad", _conv2d_input_grad_forward, _conv2d_input_grad_vjp)
_conv2d_weight_grad = Primitive("conv2d_weight_grad", _conv2d_weight_grad_forward, _conv2d_weight_grad_vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, C, H, W] with ``w`` [O, C, k, k], zero padding ``pad``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not match")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {pad}")
    if conv_output_size(x.shape[2], w.shape[2], stride, pad) < 1 or conv_output_size(x.shape[3], w.shape[3], stride, pad) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    return _conv2d(x, w, stride=int(stride), pad=int(pad))


def conv2d_input_grad(g: Tensor, w: Tensor, x_shape: Tuple[int, ...], stride: int, pad: int) -> Tensor:
    """Adjoint of conv2d with respect to its input (a padded transposed correlation)."""
    return _conv2d_input_grad(g, w, x_shape=tuple(x_shape), stride=stride, pad=pad)


def conv2d_weight_grad(x: Tensor, g: Tensor, w_shape: Tuple[int, ...], stride: int, pad: int) -> Tensor:
    """Adjoint of conv2d with respect to its kernel."""
    return _conv2d_weight_grad(x, g, w_shape=tuple(w_shape), stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# Pooling


def _avg_pool_forward(x: np.ndarray, size: int) -> np.ndarray:
    batch, channels, height, width = x.shape
    return x.reshape(batch, channels, height // size, size, width // size, size).mean(axis=(3, 5))


def _avg_unpool_forward(g: np.ndarray, size: int) -> np.ndarray:
    return np.repeat(np.repeat(g, size, axis=2), size, axis=3) / float(size * size)


def _avg_pool_vjp(args, out, g, needed, size):
    return (_avg_unpool(g, size=size),)


def _avg_unpool_vjp(args, out, u, needed, size):
    return (_avg_pool(u, size=size),)


_avg_pool = Primitive("avg_pool2d", _avg_pool_forward, _avg_pool_vjp)
_avg_unpool = Primitive("avg_unpool2d", _avg_unpool_forward, _avg_unpool_vjp)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    if x.ndim != 4 or size < 1 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"avg_pool2d: window {size} does not tile input {x.shape}")
    return _avg_pool(x, size=int(size))


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B, C, H, W] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects [B, C, H, W], got {x.shape}")
    return reduce_mean(x, axis=(2, 3))


def select_column(scores: Tensor, column: int) -> Tensor:
    """Sum over the batch of ``scores[:, column]`` as a scalar."""
    if scores.ndim != 2 or not 0 <= column < scores.shape[1]:
        raise ShapeError(f"column {column} outside scores of shape {scores.shape}")
    mask = np.zeros(scores.shape)
    mask[:, column] = 1.0
    return reduce_sum(multiply(scores, Tensor._wrap(mask)))


__all__: List[str] = [
    "Primitive",
    "add", "subtract", "multiply", "divide", "scale", "exp", "log", "relu", "safe_reciprocal",
    "matmul", "transpose", "reshape", "broadcast_to", "sum_to", "reduce_sum", "reduce_mean",
    "dot", "l2_norm", "cosine_similarity", "softmax_cross_entropy", "softmax",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad", "conv_output_size",
    "avg_pool2d", "global_average_pool", "select_column",
]
