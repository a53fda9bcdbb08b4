"""Layers with explicit forward/backward passes.

Each layer exposes ``params`` (name -> float64 array, updated in place by the
optimizer), ``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> (dx, grads)``
where ``grads`` mirrors ``params``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels


class NNError(Exception):
    pass


class ShapeMismatch(NNError, ValueError):
    pass


def _check_rank4(x, who):
    if x.ndim != 4:
        raise ShapeMismatch(f"{who} expects (batch, channels, rows, cols), got shape {x.shape}")


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Layer:
    params: dict

    def __init__(self):
        self.params = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def output_shape(self, in_shape):
        y, _ = self.forward(np.zeros((1,) + tuple(in_shape)))
        return y.shape[1:]

    def __repr__(self):
        return type(self).__name__ + "()"


class Conv2D(Layer):
    """Grouped, strided 2-D cross-correlation with bias."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding="same", groups=1, rng=None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ShapeMismatch(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_ch // groups) * kernel * kernel
        self.params = {
            "w": he_normal(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in),
            "b": np.zeros(out_ch),
        }

    def pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return _same_pads(h, self.kernel, self.stride), _same_pads(w, self.kernel, self.stride)

    def forward(self, x):
        _check_rank4(x, "Conv2D")
        if x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"Conv2D expects {self.in_ch} channels, got {x.shape[1]}")
        (pt, pb), (pl, pr) = self.pads(x.shape[2], x.shape[3])
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
        if xp.shape[2] < self.kernel or xp.shape[3] < self.kernel:
            raise ShapeMismatch(f"Conv2D kernel {self.kernel} larger than input {xp.shape[2:]}")
        y = kernels.conv_forward(xp, self.params["w"], self.params["b"], self.stride, self.groups)
        return y, (xp, (pt, pb, pl, pr))

    def backward(self, dy, cache):
        xp, (pt, pb, pl, pr) = cache
        dxp, dw, db = kernels.conv_backward(xp, self.params["w"], dy, self.stride, self.groups)
        dx = dxp[:, :, pt:dxp.shape[2] - pb, pl:dxp.shape[3] - pr]
        return dx, {"w": dw, "b": db}

    def __repr__(self):
        g = f", groups={self.groups}" if self.groups > 1 else ""
        return f"Conv2D({self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride}, {self.padding}{g})"


def conv_output_dim(u, k, stride, pad_total=0):
    return (u + pad_total - k) // stride + 1


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid(x)
        return y, y

    def backward(self, dy, y):
        return dy * y * (1.0 - y), {}


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def pool_output_dim(u, r, h):
    return (u - r) // h + 1


class MaxPool2D(Layer):
    def __init__(self, r=2, h=2):
        super().__init__()
        if r < 1 or h < 1:
            raise ValueError("pool window and stride must be >= 1")
        self.r, self.h = r, h

    def forward(self, x):
        _check_rank4(x, "MaxPool2D")
        if x.shape[2] < self.r or x.shape[3] < self.r:
            raise ShapeMismatch(f"pool window {self.r} larger than input {x.shape[2:]}")
        y, arg = kernels.maxpool_forward(x, self.r, self.h)
        return y, (arg, x.shape)

    def backward(self, dy, cache):
        arg, shape = cache
        return kernels.maxpool_backward(dy, arg, self.r, self.h, shape), {}

    def __repr__(self):
        return f"MaxPool2D(r={self.r}, h={self.h})"


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params = {"w": he_normal(rng, (n_in, n_out), n_in), "b": np.zeros(n_out)}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"Dense expects (batch, {self.n_in}), got {x.shape}")
        return x @ self.params["w"] + self.params["b"], x

    def backward(self, dy, x):
        return dy @ self.params["w"].T, {"w": x.T @ dy, "b": dy.sum(axis=0)}

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out})"


class SqueezeExcite(Layer):
    """Global average pool -> dense -> ReLU -> dense -> sigmoid -> channel rescale."""

    def __init__(self, channels, reduction=4, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, -(-channels // reduction))
        self.channels, self.hidden = channels, hidden
        self.params = {
            "w1": he_normal(rng, (channels, hidden), channels),
            "b1": np.zeros(hidden),
            "w2": he_normal(rng, (hidden, channels), hidden),
            "b2": np.zeros(channels),
        }

    def forward(self, x):
        _check_rank4(x, "SqueezeExcite")
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"SE expects {self.channels} channels, got {x.shape[1]}")
        p = self.params
        s = x.mean(axis=(2, 3))
        z1 = s @ p["w1"] + p["b1"]
        a1 = np.maximum(z1, 0.0)
        gate = sigmoid(a1 @ p["w2"] + p["b2"])
        return x * gate[:, :, None, None], (x, s, z1, a1, gate)

    def backward(self, dy, cache):
        x, s, z1, a1, gate = cache
        p = self.params
        dgate = (dy * x).sum(axis=(2, 3))
        dz2 = dgate * gate * (1.0 - gate)
        da1 = dz2 @ p["w2"].T
        dz1 = da1 * (z1 > 0)
        ds = dz1 @ p["w1"].T
        dx = dy * gate[:, :, None, None] + ds[:, :, None, None] / (x.shape[2] * x.shape[3])
        grads = {"w1": s.T @ dz1, "b1": dz1.sum(axis=0), "w2": a1.T @ dz2, "b2": dz2.sum(axis=0)}
        return dx, grads

    def __repr__(self):
        return f"SqueezeExcite({self.channels}, hidden={self.hidden})"


class Sequential(Layer):
    """Ordered sublayers; parameters are exposed as ``"<index>.<name>"``."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self._rebuild_params()

    def _rebuild_params(self):
        self.params = {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(dy, caches[i])
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return dy, grads


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    expansion: int = 1
    se_reduction: int = 4
    skip: bool = False
    stride: int = 1
    kernel: int = 3
    window: int = 2
    activation: str = "relu"

    KINDS = ("mbconv", "fused_mbconv", "conv", "pool", "flatten", "dense")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.skip and (self.in_ch != self.out_ch or self.stride != 1):
            raise ShapeMismatch("skip connection requires equal in/out channels and stride 1")


class _Block(Sequential):
    """Sequential body with an optional residual connection."""

    skip = False

    def forward(self, x):
        y, caches = super().forward(x)
        if self.skip:
            if y.shape != x.shape:
                raise ShapeMismatch(f"residual shapes differ: {x.shape} vs {y.shape}")
            y = y + x
        return y, caches

    def backward(self, dy, caches):
        dx, grads = super().backward(dy, caches)
        if self.skip:
            dx = dx + dy
        return dx, grads


class MBConv(_Block):
    """1x1 expand -> depthwise conv -> SE -> 1x1 project, ReLU after each conv."""

    def __init__(self, in_ch, out_ch, expansion=4, kernel=3, stride=1, se_reduction=4, skip=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = in_ch * expansion
        self.skip = bool(skip)
        if self.skip and (in_ch != out_ch or stride != 1):
            raise ShapeMismatch("skip connection requires equal in/out channels and stride 1")
        super().__init__([
            Conv2D(in_ch, mid, 1, rng=rng), ReLU(),
            Conv2D(mid, mid, kernel, stride, groups=mid, rng=rng), ReLU(),
            SqueezeExcite(mid, se_reduction, rng=rng),
            Conv2D(mid, out_ch, 1, rng=rng), ReLU(),
        ])
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride

    @property
    def expand(self):
        return self.layers[0]

    @property
    def depthwise(self):
        return self.layers[2]

    @property
    def se(self):
        return self.layers[4]

    @property
    def project(self):
        return self.layers[5]

    def __repr__(self):
        return f"MBConv({self.in_ch}->{self.out_ch}, s={self.stride}, skip={self.skip})"


class FusedMBConv(_Block):
    """Fused kxk expand conv -> SE -> 1x1 project, ReLU after each conv."""

    def __init__(self, in_ch, out_ch, expansion=4, kernel=3, stride=1, se_reduction=4, skip=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = in_ch * expansion
        self.skip = bool(skip)
        if self.skip and (in_ch != out_ch or stride != 1):
            raise ShapeMismatch("skip connection requires equal in/out channels and stride 1")
        super().__init__([
            Conv2D(in_ch, mid, kernel, stride, rng=rng), ReLU(),
            SqueezeExcite(mid, se_reduction, rng=rng),
            Conv2D(mid, out_ch, 1, rng=rng), ReLU(),
        ])
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride

    @property
    def fused(self):
        return self.layers[0]

    @property
    def se(self):
        return self.layers[2]

    @property
    def project(self):
        return self.layers[3]

    def __repr__(self):
        return f"FusedMBConv({self.in_ch}->{self.out_ch}, s={self.stride}, skip={self.skip})"


def build_block(spec: BlockSpec, rng=None):
    if spec.kind == "mbconv":
        return MBConv(spec.in_ch, spec.out_ch, spec.expansion, spec.kernel, spec.stride,
                      spec.se_reduction, spec.skip, rng=rng)
    if spec.kind == "fused_mbconv":
        return FusedMBConv(spec.in_ch, spec.out_ch, spec.expansion, spec.kernel, spec.stride,
                           spec.se_reduction, spec.skip, rng=rng)
    if spec.kind == "conv":
        return Conv2D(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, rng=rng)
    if spec.kind == "pool":
        return MaxPool2D(spec.window, spec.stride)
    if spec.kind == "flatten":
        return Flatten()
    return Dense(spec.in_ch, spec.out_ch, rng=rng)


def se_block(x, se: SqueezeExcite):
    return se.forward(np.asarray(x, dtype=np.float64))[0]


def mbconv_forward(x, block: MBConv):
    return block.forward(np.asarray(x, dtype=np.float64))[0]


def fused_mbconv_forward(x, block: FusedMBConv):
    return block.forward(np.asarray(x, dtype=np.float64))[0]


def conv2d_forward(x, layer: Conv2D):
    return layer.forward(np.asarray(x, dtype=np.float64))[0]


def maxpool_forward(x, pool: MaxPool2D):
    return pool.forward(np.asarray(x, dtype=np.float64))[0]
