"""Parameterized layers built on :mod:`icanet.tensor`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal container: parameters, buffers and child modules are found
    by walking instance attributes (lists of modules are supported)."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_tensors(self, prefix: str = "") -> Iterator[tuple]:
        """Parameters and buffers (running statistics) in a stable order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_tensors(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. for 64-bit checks)."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = t.grad.astype(dtype)
        return self


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    """Square-kernel convolution.  ``padding=None`` picks the
    extent-preserving value ``dilation * (k - 1) / 2`` (odd ``k``)."""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 3,
        rng: Optional[np.random.Generator] = None,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        bias: bool = True,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding is None:
            if k % 2 == 0:
                raise ValueError("automatic padding needs an odd kernel")
            padding = dilation * (k - 1) // 2
        self.stride, self.padding, self.dilation = stride, padding, dilation
        fan_in = cin * k * k
        self.weight = _uniform(rng, (cout, cin, k, k), fan_in)
        self.bias = _uniform(rng, (cout,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class CBR(Module):
    """Convolution -> batch norm -> ReLU.

    The convolution has no bias: train-mode batch norm subtracts it again,
    which would leave a parameter with an identically zero gradient.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class BAM(Module):
    """Bottleneck attention with plain gating: ``x * sigmoid(ch + sp)``.

    Channel branch: global average pool, then C -> C/r (CBR) -> C, realised
    as 1x1 convolutions on the pooled ``(N, C, 1, 1)`` descriptor.  Spatial
    branch: 1x1 reduce, two 3x3 dilation-4 convolutions (each a CBR), then a
    1x1 convolution to one map.  The batch norms before each hidden ReLU keep
    some units active for every batch; without them the two-channel
    bottleneck of small configs is often entirely dead at initialization.
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dilation: int = 4):
        mid = channels // reduction
        if mid < 1:
            raise ValueError(f"BAM: {channels} channels too few for reduction {reduction}")
        self.channels = channels
        self.fc1 = CBR(channels, mid, 1, rng)
        self.fc2 = Conv2d(mid, channels, 1, rng)
        self.reduce = CBR(channels, mid, 1, rng)
        self.dil1 = CBR(mid, mid, 3, rng, dilation=dilation)
        self.dil2 = CBR(mid, mid, 3, rng, dilation=dilation)
        self.spatial_out = Conv2d(mid, 1, 1, rng)

    def attention(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"BAM: expected {self.channels} channels, got {x.shape[1]}")
        ch = self.fc2(self.fc1(T.tmean(x, axis=(2, 3), keepdims=True)))
        sp = self.spatial_out(self.dil2(self.dil1(self.reduce(x))))
        return T.sigmoid(T.expand(ch, x.shape) + T.expand(sp, x.shape))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.attention(x)
