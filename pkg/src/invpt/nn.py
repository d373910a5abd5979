"""Parameter containers and the handful of layers the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    """Minimal parameter tree: attributes that are Tensors with
    ``requires_grad`` are parameters, Modules and lists of Modules recurse."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, tc.BatchStats):
                yield full + ".running_mean", value.running_mean
                yield full + ".running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
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

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return tc.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = normal_param(rng, (c_in, c_out))
        self.bias = tc.parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, bias: bool = True):
        self.weight = normal_param(rng, (c_out, c_in, kernel, kernel))
        self.bias = tc.parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class TransposedConv2d(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.weight = normal_param(rng, (c_in, c_out, stride, stride))
        self.bias = tc.parameter(np.zeros(c_out))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return tc.transposed_conv2d(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gamma = tc.parameter(np.ones(channels))
        self.beta = tc.parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return tc.normalize(x, "layer", self.gamma, self.beta)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = tc.parameter(np.ones(channels))
        self.beta = tc.parameter(np.zeros(channels))
        self.stats = tc.BatchStats.fresh(channels)

    def forward(self, x: Tensor) -> Tensor:
        return tc.normalize(x, "batch", self.gamma, self.beta, self.stats, self.training)


class ConvBNReLU(Module):
    """3x3 conv (no bias, BN follows), batch norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3):
        self.conv = Conv2d(c_in, c_out, kernel, rng, bias=False)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return tc.relu(self.bn(self.conv(x)))
