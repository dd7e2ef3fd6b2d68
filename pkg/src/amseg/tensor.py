"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 or float64, C-contiguous).  Each thread
owns one append-only :class:`ComputationRecord`.  An operation whose inputs
require gradients appends a node holding the op kind, the ids of its input
nodes, and a backward closure; because every input to an op was appended
before the op itself, append order is a topological order, and ``backward``
walks the nodes once in reverse, accumulating gradients by node id and
summing them into ``.grad`` on leaf tensors.

Broadcasting (``add`` / ``mul`` / ``div`` only) follows the usual trailing
rule: shapes are right-aligned, each aligned pair of extents must be equal or
contain a 1, and missing leading extents count as 1.  The gradient of a
broadcast operand is summed over the expanded axes back to its own shape.

Gradients never flow in place: closures return fresh arrays and must not
mutate the incoming gradient.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "active_record",
    "no_record",
    "set_nan_debug",
    "add",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "softmax_lastdim",
    "matmul",
    "conv2d",
    "concat",
    "split",
    "narrow",
    "nearest_upsample2x",
    "maxpool2x2",
    "batchnorm2d",
]

_FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

_tls = threading.local()
_nan_debug = bool(int(os.environ.get("AMSEG_NAN_DEBUG", "0") or "0"))


def set_nan_debug(enabled: bool) -> None:
    """Toggle the per-op finiteness check (slow; for debugging NaN sources)."""
    global _nan_debug
    _nan_debug = bool(enabled)


class no_record:
    """Context manager that disables recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = getattr(_tls, "grad_enabled", True)
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class Tensor:
    """A dense n-d value with an optional gradient slot.

    ``data`` is treated as immutable once the tensor has entered a recorded
    computation; only ``grad`` (and parameter buffers under an explicit
    optimizer step or gradient-check probe) are ever rewritten.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_gen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._gen: int = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data outside any recorded computation."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        active_record().backward(self)

    # -- recorded shape/reduction helpers ------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"


class _Node:
    __slots__ = ("id", "kind", "input_ids", "inputs", "backward_fn")

    def __init__(self, node_id, kind, inputs, backward_fn):
        self.id = node_id
        self.kind = kind
        self.inputs = inputs
        self.input_ids = tuple(t.node_id for t in inputs)
        self.backward_fn = backward_fn


class ComputationRecord:
    """Append-only tape of recorded operations for one thread.

    ``backward`` consumes the record; recording a new operation afterwards
    starts a fresh generation, and tensors produced under an older generation
    are treated as constants if they re-enter the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def append(self, kind: str, inputs: Sequence[Tensor], backward_fn: Callable) -> int:
        if self.consumed:
            self.reset()
        node_id = len(self.nodes)
        self.nodes.append(_Node(node_id, kind, tuple(inputs), backward_fn))
        return node_id

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) to every recorded tensor, summing into leaves.

        Visits nodes exactly once, in reverse append order.  Raises
        :class:`UsageError` if the loss is not a scalar output of this record
        or if the record was already consumed.
        """
        if self.consumed:
            raise UsageError("backward called twice on the same computation record")
        if loss.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss._gen != self.generation:
            raise UsageError("loss is not an output of the active computation record")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad_out = grads.pop(node.id, None)
            if grad_out is None:
                continue
            input_grads = node.backward_fn(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.node_id is not None and tensor._gen == self.generation:
                    prev = grads.get(tensor.node_id)
                    grads[tensor.node_id] = grad if prev is None else prev + grad
                else:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        self.consumed = True


def active_record() -> ComputationRecord:
    record = getattr(_tls, "record", None)
    if record is None:
        record = ComputationRecord()
        _tls.record = record
    return record


# -- op plumbing ---------------------------------------------------------------


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _coerce_pair(kind: str, a, b) -> tuple:
    """Wrap plain scalars/arrays as constants in the other operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_dtypes(kind, a, b)
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return Tensor(a), Tensor(b)


def _check_dtypes(kind: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = sorted(dt.name for dt in dtypes)
        raise UsageError(f"{kind}: mixed dtypes {names}; cast inputs explicitly")


def _finish(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _nan_debug and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"{kind} produced a non-finite value")
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        record = active_record()
        out.requires_grad = True
        out.node_id = record.append(kind, inputs, backward_fn)
        out._gen = record.generation
    return out


def _broadcast_shape(kind: str, a: tuple, b: tuple) -> tuple:
    out = []
    for x, y in zip(reversed((1,) * max(0, len(b) - len(a)) + a),
                    reversed((1,) * max(0, len(a) - len(b)) + b)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{kind}: shapes do not broadcast", expected=a, actual=b)
        out.append(max(x, y))
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- pointwise ops --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair("add", a, b)
    _broadcast_shape("add", a.shape, b.shape)
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _finish("add", (a, b), a.data + b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair("mul", a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _finish("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair("div", a, b)
    _broadcast_shape("div", a.shape, b.shape)
    out_data = a.data / b.data
    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out_data / b.data, b.shape)
        return ga, gb
    return _finish("div", (a, b), out_data, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    def backward(g):
        return (g * factor,)
    return _finish("scale", (x,), x.data * factor, backward)


def relu(x: Tensor) -> Tensor:
    # Subgradient at 0 is taken as 0. np.maximum (unlike a where on x > 0)
    # propagates NaN, which the non-finite diagnostics rely on.
    mask = x.data > 0
    def backward(g):
        return (g * mask,)
    return _finish("relu", (x,), np.maximum(x.data, x.data.dtype.type(0)), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Two-branch form avoids exp overflow for large |x|.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)
    def backward(g):
        return (g * out_data * (1.0 - out_data),)
    return _finish("sigmoid", (x,), out_data, backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the trailing axis, stabilised by a row-max shift."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)
    return _finish("softmax_lastdim", (x,), out_data, backward)


def _sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    out_data = x.data.sum(axis=axes if axis is not None else None, keepdims=keepdims)
    def backward(g):
        gg = g
        if not keepdims:
            expand = list(out_data.shape)
            for a in sorted(axes):
                expand.insert(a, 1)
            gg = g.reshape(expand)
        return (np.broadcast_to(gg, x.shape).copy(),)
    return _finish("sum", (x,), out_data, backward)


# -- matmul and convolution ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes.

    Leading (batch) extents must match exactly; there is no implicit batch
    broadcasting.
    """
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2", expected=">=2", actual=(a.ndim, b.ndim))
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul: batch extents differ", expected=a.shape[:-2], actual=b.shape[:-2])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: inner extents differ", expected=a.shape[-1], actual=b.shape[-2])
    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb
    return _finish("matmul", (a, b), np.matmul(a.data, b.data), backward)


def _conv_out_extent(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dil: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dil
        for j in range(kw):
            wj = j * dil
            cols[:, :, i, j] = xp[:, :, hi:hi + (out_h - 1) * stride + 1:stride,
                                  wj:wj + (out_w - 1) * stride + 1:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-d cross-correlation of  x: (N, C_in, H, W)  with  weight:
    (C_out, C_in/groups, kH, kW), plus an optional per-channel bias.

    Output extent per axis is ``(size + 2*padding - dilation*(k-1) - 1) //
    stride + 1`` and must be at least 1.  The forward lowers each input to
    patch columns and runs one grouped matrix product; the backward scatters
    patch gradients additively back onto the padded input.
    """
    _check_dtypes("conv2d", *[t for t in (x, weight, bias) if t is not None])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight",
                         expected="(N,C,H,W)/(O,I,kh,kw)", actual=(x.shape, weight.shape))
    if stride < 1 or dilation < 1 or padding < 0:
        raise UsageError(f"conv2d: invalid stride/padding/dilation {(stride, padding, dilation)}")
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError("conv2d: channels not divisible by groups",
                         expected=f"multiple of {groups}", actual=(c_in, c_out))
    if c_in_g != c_in // groups:
        raise ShapeError("conv2d: weight channel extent mismatch",
                         expected=c_in // groups, actual=c_in_g)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d: bias shape mismatch", expected=(c_out,), actual=bias.shape)
    out_h = _conv_out_extent(h, kh, stride, padding, dilation)
    out_w = _conv_out_extent(w, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d: output extent would be empty",
                         expected=">=1", actual=(out_h, out_w))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    length = out_h * out_w
    k_g = c_in_g * kh * kw
    cols_g = cols.reshape(n, groups, k_g, length)
    w_mat = weight.data.reshape(groups, c_out // groups, k_g)
    out = np.matmul(w_mat, cols_g).reshape(n, c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g4 = g.reshape(n, groups, c_out // groups, length)
        grad_w = np.matmul(g4, cols_g.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
        grad_cols = np.matmul(w_mat.swapaxes(-1, -2)[None], g4) \
            .reshape(n, c_in, kh, kw, out_h, out_w)
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                grad_xp[:, :, hi:hi + (out_h - 1) * stride + 1:stride,
                        wj:wj + (out_w - 1) * stride + 1:stride] += grad_cols[:, :, i, j]
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w] if padding else grad_xp
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _finish("conv2d", inputs, out, backward)


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape: element count differs", expected=x.size,
                         actual=int(np.prod(shape)))
    def backward(g):
        return (g.reshape(x.shape),)
    return _finish("reshape", (x,), x.data.reshape(shape), backward)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose: axes must permute all dimensions",
                         expected=tuple(range(x.ndim)), actual=axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)
    return _finish("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice ``[start, start+length)`` along one axis."""
    axis = axis % x.ndim
    if length < 1 or start < 0 or start + length > x.shape[axis]:
        raise ShapeError("narrow: slice out of bounds",
                         expected=f"within [0, {x.shape[axis]}]",
                         actual=(start, start + length))
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)
    return _finish("narrow", (x,), x.data[index].copy(), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty sequence")
    _check_dtypes("concat", *tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != ndim or [s for i, s in enumerate(other) if i != axis] != \
                [s for i, s in enumerate(base) if i != axis]:
            raise ShapeError("concat: non-concatenated extents differ",
                             expected=tuple(base), actual=t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        grads = []
        for i in range(len(sizes)):
            index = [slice(None)] * ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(np.ascontiguousarray(g[tuple(index)]))
        return tuple(grads)
    return _finish("concat", tuple(tensors),
                   np.concatenate([t.data for t in tensors], axis=axis), backward)


def split(x: Tensor, parts: int, axis: int) -> list:
    """Split into ``parts`` equal slices along ``axis`` (extent must divide)."""
    axis = axis % x.ndim
    extent = x.shape[axis]
    if parts < 1 or extent % parts:
        raise ShapeError("split: extent not divisible by parts",
                         expected=f"multiple of {parts}", actual=extent)
    step = extent // parts
    return [narrow(x, axis, i * step, step) for i in range(parts)]


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by exactly 2 on both spatial axes."""
    if x.ndim != 4:
        raise ShapeError("nearest_upsample2x expects (N,C,H,W)", expected=4, actual=x.ndim)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _finish("nearest_upsample2x", (x,), out, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    element in row-major window order."""
    if x.ndim != 4:
        raise ShapeError("maxpool2x2 expects (N,C,H,W)", expected=4, actual=x.ndim)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2x2: spatial extents must be even", expected="even", actual=(h, w))
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(n, c, h // 2, w // 2, 4)
    winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
    def backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, winners[..., None], g[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, h // 2, w // 2, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(grad),)
    return _finish("maxpool2x2", (x,), np.ascontiguousarray(out), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray, *,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation with a learned affine pair.

    In training mode (batch of at least 2) the batch mean and biased variance
    normalise the input and the running buffers are updated in place, with the
    unbiased variance entering the running average.  Otherwise the running
    statistics are used and no buffer changes.
    """
    _check_dtypes("batchnorm2d", x, gamma, beta)
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects (N,C,H,W)", expected=4, actual=x.ndim)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d: affine shape mismatch", expected=(c,),
                         actual=(gamma.shape, beta.shape))
    axes = (0, 2, 3)
    m = n * h * w
    use_batch = training and n >= 2
    if use_batch:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        scale_ = (gamma.data * inv_std)[None, :, None, None]
        if use_batch:
            grad_x = scale_ * (g - grad_beta[None, :, None, None] / m
                               - x_hat * grad_gamma[None, :, None, None] / m)
        else:
            grad_x = scale_ * g
        return np.ascontiguousarray(grad_x), grad_gamma, grad_beta

    return _finish("batchnorm2d", (x, gamma, beta), out, backward)
