"""Network container, compound scaling and the loss/gradient entry points."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import (Conv2D, Dense, Flatten, FusedMBConv, Layer, MaxPool2D, MBConv, NNError, ReLU,
                     Sequential, ShapeMismatch)

N_CLASSES = 5


class StaleTape(NNError):
    pass


@dataclass(frozen=True)
class ScalingConfig:
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15
    phi: float = 0.0
    d0: int = 2
    w0: int = 8
    r0: int = 32

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) <= 1:
                raise ValueError(f"{name} must be > 1")
        if self.phi < 0:
            raise ValueError("phi must be >= 0")


def compound_scale(cfg: ScalingConfig) -> tuple[int, int, int]:
    """Scaled (depth, width, resolution), each rounded half-up and at least 1."""
    def scale(base, const):
        return max(1, math.floor(const ** cfg.phi * base + 0.5))

    return scale(cfg.d0, cfg.alpha), scale(cfg.w0, cfg.beta), scale(cfg.r0, cfg.gamma)


class LayerStack(Sequential):
    """Sequential network with a fixed input shape ``(channels, rows, cols)``."""

    def __init__(self, layers, input_shape, description=None):
        super().__init__(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.description = description or {}
        self.version = 0

    def param_items(self):
        return list(self.params.items())

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def flatten_index(self):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Flatten):
                return i
        return None

    def get_state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_state(self, state):
        for k, v in self.params.items():
            if k not in state or state[k].shape != v.shape:
                raise ShapeMismatch(f"parameter {k} missing or mis-shaped in state")
            v[...] = state[k]
        self.version += 1

    def __repr__(self):
        body = "\n".join(f"  [{i}] {layer!r}" for i, layer in enumerate(self.layers))
        return f"LayerStack(input={self.input_shape}, params={self.n_params()})\n{body}"


def build_network(cfg: ScalingConfig = ScalingConfig(), n_classes=N_CLASSES, seed=0,
                  expansion=2, se_reduction=4, dense_units=256, in_channels=1) -> LayerStack:
    """Stem conv, fused blocks, MBConv blocks, 1x1 conv, pool, flatten, dense head."""
    depth, width, res = compound_scale(cfg)
    rng = np.random.default_rng(seed)
    n_fused = max(1, (depth + 1) // 2)
    n_mb = max(1, depth - n_fused)
    layers: list[Layer] = [Conv2D(in_channels, width, 3, stride=2, rng=rng), ReLU()]
    for _ in range(n_fused):
        layers.append(FusedMBConv(width, width, expansion, 3, 1, se_reduction, skip=True, rng=rng))
    wide = 2 * width
    for i in range(n_mb):
        if i == 0:
            layers.append(MBConv(width, wide, expansion, 3, 2, se_reduction, skip=False, rng=rng))
        else:
            layers.append(MBConv(wide, wide, expansion, 3, 1, se_reduction, skip=True, rng=rng))
    layers += [Conv2D(wide, wide, 1, rng=rng), ReLU(), MaxPool2D(2, 2), Flatten()]
    shape = (in_channels, res, res)
    probe = np.zeros((1,) + shape)
    for layer in layers:
        probe, _ = layer.forward(probe)
    layers += [Dense(probe.shape[1], dense_units, rng=rng), ReLU(), Dense(dense_units, n_classes, rng=rng)]
    desc = {"depth": depth, "width": width, "resolution": res, "expansion": expansion,
            "se_reduction": se_reduction, "dense_units": dense_units, "n_classes": n_classes,
            "in_channels": in_channels, "seed": seed}
    return LayerStack(layers, shape, desc)


@dataclass
class ActivationTape:
    """Per-layer caches plus the input of every layer (``inputs[i]`` feeds layer i)."""

    caches: list
    inputs: list
    logits: np.ndarray
    version: int


def forward(net: LayerStack, x, keep_activations=True):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeMismatch(f"network expects (N, {net.input_shape}), got {x.shape}")
    caches, inputs = [], []
    for layer in net.layers:
        if keep_activations:
            inputs.append(x)
        x, c = layer.forward(x)
        if keep_activations:
            caches.append(c)
    tape = ActivationTape(caches, inputs, x, net.version) if keep_activations else None
    return x, tape


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def _check_tape(net, tape):
    if tape is None or not tape.caches:
        raise StaleTape("no activations recorded; call forward with keep_activations=True")
    if tape.version != net.version:
        raise StaleTape("network parameters changed since the tape was recorded")


def backward_from(net: LayerStack, tape: ActivationTape, dlogits, stop=0):
    """Backpropagate ``dlogits`` down to the input of layer ``stop``.

    Returns ``(d_input_of_stop, grads)`` with grads only for layers >= stop.
    """
    _check_tape(net, tape)
    dy = dlogits
    grads = {}
    for i in range(len(net.layers) - 1, stop - 1, -1):
        dy, g = net.layers[i].backward(dy, tape.caches[i])
        for k, v in g.items():
            grads[f"{i}.{k}"] = v
    return dy, grads


class Gradients(dict):
    """Parameter-name -> gradient mapping with the batch loss attached."""

    loss: float = float("nan")


def backward(net: LayerStack, tape: ActivationTape, labels) -> Gradients:
    _check_tape(net, tape)
    loss, dlogits = softmax_cross_entropy(tape.logits, labels)
    _, g = backward_from(net, tape, dlogits)
    grads = Gradients(g)
    grads.loss = loss
    return grads


def predict_logits(net: LayerStack, x, batch_size=64):
    x = np.asarray(x, dtype=np.float64)
    out = [forward(net, x[i:i + batch_size], keep_activations=False)[0]
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.layers[-1].n_out))


def predict_proba(net: LayerStack, x, batch_size=64):
    return softmax(predict_logits(net, x, batch_size))


def evaluate_loss(net: LayerStack, x, labels, batch_size=64):
    """Mean cross-entropy and class probabilities over a dataset."""
    logits = predict_logits(net, x, batch_size)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss, softmax(logits)
