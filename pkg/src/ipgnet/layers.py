"""Parameter-holding layers: convolution, norms, and the bottleneck block.

Initialization is keyed by parameter name, not construction order: every
parameter draws from its own generator seeded by (master seed, name hash).
Networks that share a sub-structure therefore share its initial weights
bit for bit, regardless of what else they contain.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, add, relu

__all__ = ["ParamInit", "Conv2d", "BatchNorm2d", "LayerNorm", "Bottleneck", "trainable_count"]


class ParamInit:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        tag = int.from_bytes(digest[:8], "little")
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, tag])))

    def he_conv(self, name: str, c_out: int, c_in: int, k: int) -> np.ndarray:
        std = np.sqrt(2.0 / (c_in * k * k))
        return self.rng(name).normal(0.0, std, size=(c_out, c_in, k, k))


def identity_pointwise(c: int) -> np.ndarray:
    """1x1 kernel acting as the identity channel map."""
    return np.eye(c).reshape(c, c, 1, 1)


class Conv2d:
    """Convolution layer; ``weight_init`` is "he", "zeros", "identity",
    or an explicit kernel array."""

    def __init__(self, init: ParamInit, name: str, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = False, weight_init="he"):
        self.stride, self.padding, self.dilation = stride, padding, dilation
        if isinstance(weight_init, np.ndarray):
            data = weight_init
        elif weight_init == "he":
            data = init.he_conv(f"{name}.weight", c_out, c_in, kernel)
        elif weight_init == "zeros":
            data = np.zeros((c_out, c_in, kernel, kernel))
        elif weight_init == "identity":
            assert c_in == c_out and kernel == 1
            data = identity_pointwise(c_out)
        else:
            raise ValueError(f"unknown weight init {weight_init!r}")
        self.weight = Parameter(f"{name}.weight", data)
        self.bias = Parameter(f"{name}.bias", np.zeros((1, c_out, 1, 1))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d:
    """Batch norm layer; running stats are non-trainable buffer parameters
    so they travel with checkpoints."""

    def __init__(self, init: ParamInit, name: str, channels: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(f"{name}.gamma", np.ones((1, channels, 1, 1)))
        self.beta = Parameter(f"{name}.beta", np.zeros((1, channels, 1, 1)))
        self.running_mean = Parameter(f"{name}.running_mean", np.zeros((1, channels, 1, 1)), trainable=False)
        self.running_var = Parameter(f"{name}.running_var", np.ones((1, channels, 1, 1)), trainable=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean.data, self.running_var.data,
                              training, self.momentum, self.eps)

    def parameters(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]


class LayerNorm:
    def __init__(self, name: str, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.scale = Parameter(f"{name}.scale", np.ones((1, channels, 1, 1)))
        self.shift = Parameter(f"{name}.shift", np.zeros((1, channels, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.scale, self.shift, self.eps)

    def parameters(self):
        return [self.scale, self.shift]


class Bottleneck:
    """1x1 reduce -> 3x3 -> 1x1 expand, with a projected shortcut whenever
    the block changes resolution or width."""

    def __init__(self, init: ParamInit, name: str, c_in: int, c_out: int, mid: int,
                 stride: int = 1, dilation: int = 1):
        self.conv1 = Conv2d(init, f"{name}.conv1", c_in, mid, 1)
        self.bn1 = BatchNorm2d(init, f"{name}.bn1", mid)
        self.conv2 = Conv2d(init, f"{name}.conv2", mid, mid, 3,
                            stride=stride, padding=dilation, dilation=dilation)
        self.bn2 = BatchNorm2d(init, f"{name}.bn2", mid)
        self.conv3 = Conv2d(init, f"{name}.conv3", mid, c_out, 1)
        self.bn3 = BatchNorm2d(init, f"{name}.bn3", c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(init, f"{name}.proj", c_in, c_out, 1, stride=stride)
            self.proj_bn = BatchNorm2d(init, f"{name}.proj_bn", c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), training))
        y = relu(self.bn2(self.conv2(y), training))
        y = self.bn3(self.conv3(y), training)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return relu(add(y, shortcut))

    def parameters(self):
        params = (self.conv1.parameters() + self.bn1.parameters()
                  + self.conv2.parameters() + self.bn2.parameters()
                  + self.conv3.parameters() + self.bn3.parameters())
        if self.proj is not None:
            params += self.proj.parameters() + self.proj_bn.parameters()
        return params


def trainable_count(params) -> int:
    return sum(p.size for p in params if p.trainable)
