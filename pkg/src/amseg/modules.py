"""Parameter containers and the basic learnable layers.

A :class:`Module` discovers parameters and submodules by scanning its
attributes (lists and tuples of modules included), so blocks compose without
any registration calls.  Weight tensors are drawn uniform in
``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from a caller-supplied generator and
biases start at zero, which keeps construction deterministic for a fixed
seed regardless of build order.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

__all__ = ["Module", "Conv2d", "Linear", "BatchNorm2d", "uniform_init"]


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: parameter traversal, train/eval mode, gradient reset."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    """Learned 2-d cross-correlation; see :func:`amseg.tensor.conv2d`."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError("Conv2d: channels not divisible by groups",
                             expected=f"multiple of {groups}",
                             actual=(in_channels, out_channels))
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        fan_in = (in_channels // groups) * k * k
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.weight = uniform_init(rng, (out_channels, in_channels // groups, k, k),
                                   fan_in, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation,
                        groups=self.groups)


class Linear(Module):
    """Affine map on the trailing axis of a 2-d input."""

    def __init__(self, in_features: int, out_features: int, *,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_init(rng, (in_features, out_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError("Linear: input shape mismatch",
                             expected=("*", self.weight.shape[0]), actual=x.shape)
        return T.add(T.matmul(x, self.weight), self.bias)


class BatchNorm2d(Module):
    """Per-channel batch normalisation with learned scale and shift.

    Running statistics are plain numpy buffers, updated only in training
    mode with batches of at least two samples.
    """

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training=self.training,
                             momentum=self.momentum, eps=self.eps)
