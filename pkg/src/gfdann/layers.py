"""Parameterised layers built on :mod:`gfdann.tensor`.

Each layer owns its parameter tensors and exposes ``parameters()`` in a fixed
order, which is what checkpoints and optimisers rely on.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import (
    Tensor,
    batch_norm,
    batch_norm_relu_cm,
    depthwise_conv3x3,
    depthwise_conv3x3_cm,
    fully_connected,
    pointwise_conv1x1,
    pointwise_conv1x1_cm,
)


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Layer:
    def parameters(self) -> list[Tensor]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        """Non-learnable buffers that still belong in a checkpoint."""
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for p in self.parameters():
            yield prefix + p.name, p


class DepthwiseConv3x3(Layer):
    def __init__(self, channels: int, rng: np.random.Generator, bias: bool = False):
        self.channels = channels
        self.weight = _uniform(rng, (channels, 3, 3), 9, "weight")
        self.bias = _uniform(rng, (channels,), 9, "bias") if bias else None

    def __call__(self, x: Tensor, channel_major: bool = False) -> Tensor:
        op = depthwise_conv3x3_cm if channel_major else depthwise_conv3x3
        return op(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class PointwiseConv1x1(Layer):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, bias: bool = False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = _uniform(rng, (out_channels, in_channels), in_channels, "weight")
        self.bias = _uniform(rng, (out_channels,), in_channels, "bias") if bias else None

    def __call__(self, x: Tensor, channel_major: bool = False) -> Tensor:
        op = pointwise_conv1x1_cm if channel_major else pointwise_conv1x1
        return op(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels), requires_grad=True, name="scale")
        self.shift = Tensor(np.zeros(channels), requires_grad=True, name="shift")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool, channel_major: bool = False) -> Tensor:
        return batch_norm(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
            channel_axis=0 if channel_major else 1,
        )

    def relu_cm(self, x: Tensor, training: bool) -> Tensor:
        """Fused ``relu(self(x))`` on channel-major input."""
        return batch_norm_relu_cm(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )

    def parameters(self):
        return [self.scale, self.shift]

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator], bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True, name="weight")
            self.bias = Tensor(np.zeros(out_features), requires_grad=True, name="bias") if bias else None
        else:
            self.weight = _uniform(rng, (out_features, in_features), in_features, "weight")
            self.bias = _uniform(rng, (out_features,), in_features, "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])
