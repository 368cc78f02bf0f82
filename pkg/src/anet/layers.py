"""Parameterized layers built on the numerics primitives.

Modules register parameters and running-stat buffers by attribute walking,
so every parameter has a stable dotted name; those names drive checkpoint
records, partition tags and freezing.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import NormStats, Tensor


class Parameter(Tensor):
    """Trainable leaf tensor. `trainable=False` blocks optimizer updates."""

    __slots__ = ("trainable",)

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.trainable = True


class Module:
    """Minimal container: child modules and parameters found by attribute walk."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, NormStats):
                yield f"{name}.mean", val.mean
                yield f"{name}.var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=False, dtype=np.float32):
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = Parameter((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return nm.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, init_std=None, dtype=np.float32):
        std = np.sqrt(2.0 / din) if init_std is None else init_std
        self.w = Parameter((rng.standard_normal((dout, din)) * std).astype(dtype))
        self.b = Parameter(np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return nm.linear(x, self.w, self.b)


class Norm(Module):
    """Normalization layer over feature maps.

    mode 'batch' keeps running statistics; 'instance' has none;
    'ibn-split' instance-normalizes the first half of the channels and
    batch-normalizes the rest. A frozen layer behaves as in inference
    (running stats, no updates) even when called with train=True.
    """

    def __init__(self, channels, mode="batch", dtype=np.float32):
        self.mode = mode
        self.frozen = False
        if mode == "ibn-split":
            if channels % 2 != 0:
                raise nm.ShapeError(f"ibn-split needs even channels, got {channels}")
            half = channels // 2
            self.gamma_in = Parameter(np.ones(half, dtype=dtype))
            self.beta_in = Parameter(np.zeros(half, dtype=dtype))
            self.gamma_bn = Parameter(np.ones(half, dtype=dtype))
            self.beta_bn = Parameter(np.zeros(half, dtype=dtype))
            self.stats = NormStats.init(half, dtype)
        else:
            self.gamma = Parameter(np.ones(channels, dtype=dtype))
            self.beta = Parameter(np.zeros(channels, dtype=dtype))
            self.stats = NormStats.init(channels, dtype) if mode == "batch" else None

    def __call__(self, x, train):
        train = train and not self.frozen
        if self.mode == "ibn-split":
            params = {"gamma_in": self.gamma_in, "beta_in": self.beta_in,
                      "gamma_bn": self.gamma_bn, "beta_bn": self.beta_bn}
        else:
            params = {"gamma": self.gamma, "beta": self.beta}
        return nm.normalize(x, self.mode, params, self.stats, train)


class ConvNormRelu(Module):
    """conv -> norm -> relu unit used throughout the fusion path."""

    def __init__(self, cin, cout, k, rng, stride=1, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, padding=(k - 1) // 2, dtype=dtype)
        self.norm = Norm(cout, "batch", dtype=dtype)

    def __call__(self, x, train):
        return nm.relu(self.norm(self.conv(x), train))


class SEBlock(Module):
    """Squeeze-and-excitation channel gate.

    Pools the map to a channel descriptor, passes it through a bottleneck
    (reduction ratio r) and emits per-channel sigmoid gates in (0,1).
    """

    def __init__(self, channels, rng, reduction=16, dtype=np.float32):
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def gate(self, fmap):
        desc = nm.gap(fmap)
        return nm.sigmoid(self.fc2(nm.relu(self.fc1(desc))))

    def __call__(self, fmap):
        g = self.gate(fmap)
        return nm.mul(fmap, nm.reshape(g, (g.data.shape[0], g.data.shape[1], 1, 1)))


class ResidualBlock(Module):
    """Two conv-norm-relu units plus a skip connection.

    The skip is the identity when shapes match, otherwise a strided 1x1
    projection with its own norm. With all conv weights and norm affine
    params zeroed, the block reduces to the bare skip.
    """

    def __init__(self, cin, cout, rng, stride=1, ibn=False, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.norm1 = Norm(cout, "ibn-split" if ibn else "batch", dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm2 = Norm(cout, "batch", dtype=dtype)
        if cin != cout or stride != 1:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, dtype=dtype)
            self.proj_norm = Norm(cout, "batch", dtype=dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def __call__(self, x, train):
        y = nm.relu(self.norm1(self.conv1(x), train))
        y = nm.relu(self.norm2(self.conv2(y), train))
        skip = x if self.proj is None else self.proj_norm(self.proj(x), train)
        return nm.add(skip, y)


class CBAM(Module):
    """Channel gate (SE-style) followed by a spatial gate.

    The spatial gate runs a 7x7 convolution over the stacked channel-mean
    and channel-max maps. The combined gate is a product of two sigmoids,
    hence strictly inside (0,1).
    """

    def __init__(self, channels, rng, reduction=16, spatial_kernel=7, dtype=np.float32):
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)
        self.spatial = Conv2d(2, 1, spatial_kernel, rng, padding=(spatial_kernel - 1) // 2,
                              bias=True, dtype=dtype)

    def gate(self, fmap):
        n, c = fmap.data.shape[:2]
        channel = nm.sigmoid(self.fc2(nm.relu(self.fc1(nm.gap(fmap)))))
        channel = nm.reshape(channel, (n, c, 1, 1))
        pooled = nm.concat([nm.mean_(fmap, axis=1, keepdims=True), nm.channel_max(fmap)], axis=1)
        spatial = nm.sigmoid(self.spatial(pooled))
        return nm.mul(channel, spatial)
