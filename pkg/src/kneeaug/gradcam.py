"""Grad-CAM maps taken at the layer feeding the flatten operation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .imagecore import GrayImage, round_half_up
from .nn.layers import NNError, ShapeMismatch
from .nn.network import LayerStack, backward_from, forward, softmax

OVERLAY_ALPHA = 0.4


class NoSpatialLayer(NNError):
    pass


@dataclass
class GradCamResult:
    map: np.ndarray          # (rows, cols) at feature-map resolution, >= 0
    upsampled: np.ndarray    # image-sized heat in [0, 1]
    class_id: int
    confidence: float
    weights: np.ndarray      # per-channel importance b_k
    logit: float


def extraction_index(net: LayerStack) -> int:
    """Index of the layer whose output feeds Flatten."""
    idx = net.flatten_index()
    if idx is None or idx == 0:
        raise NoSpatialLayer("network has no spatial layer ahead of a Flatten")
    return idx


def gradcam_from_tensor(net: LayerStack, x: np.ndarray, target_class: int, out_shape=None) -> GradCamResult:
    """Grad-CAM for a single-sample tensor ``x`` of shape ``(1, C, H, W)``."""
    k = extraction_index(net)
    logits, tape = forward(net, x, keep_activations=True)
    n_classes = logits.shape[1]
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target class {target_class} outside [0, {n_classes})")
    psi = tape.inputs[k][0]
    if psi.ndim != 3:
        raise NoSpatialLayer(f"layer before Flatten is not spatial: shape {psi.shape}")
    onehot = np.zeros_like(logits)
    onehot[0, target_class] = 1.0
    dpsi, _ = backward_from(net, tape, onehot, stop=k)
    weights = dpsi[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, psi, axes=1), 0.0)
    out_h, out_w = out_shape if out_shape is not None else x.shape[2:]
    up = np.maximum(kernels.bilinear_resize(cam, out_h, out_w), 0.0)
    peak = up.max()
    if peak > 0:
        up = up / peak
    probs = softmax(logits)
    return GradCamResult(cam, up, int(target_class), float(probs[0, target_class]), weights,
                         float(logits[0, target_class]))


def compute_gradcam(net: LayerStack, img: GrayImage, target_class: int) -> GradCamResult:
    """Grad-CAM of ``img`` for ``target_class``, upsampled to the image's size.

    The image is resized to the network resolution and scaled to [0, 1] the
    same way as during training.
    """
    from .nn.train import to_tensor

    res = net.input_shape[1]
    if net.input_shape[0] != 1:
        raise ShapeMismatch("grayscale images need a single-channel network")
    x = to_tensor([img], res)
    return gradcam_from_tensor(net, x, target_class, out_shape=(img.height, img.width))


def jet(values) -> np.ndarray:
    """Piecewise-linear jet colormap, values in [0, 1] -> RGB in [0, 1]."""
    v = np.asarray(values, dtype=np.float64)[..., None]
    centers = np.array([3.0, 2.0, 1.0])
    return np.clip(1.5 - np.abs(4.0 * v - centers), 0.0, 1.0)


def render_overlay(result: GradCamResult, base: GrayImage) -> np.ndarray:
    """Blend the heat colormap onto ``base``; returns an (H, W, 3) uint8 array.

    Per channel: ``out = base * (1 - a * heat) + a * heat * 255 * jet(heat)`` with
    ``a = 0.4``, rounded half up.
    """
    heat = result.upsampled
    if heat.shape != base.shape:
        raise ShapeMismatch(f"heat map {heat.shape} does not match image {base.shape}")
    gray = base.pixels.astype(np.float64)[..., None]
    a = OVERLAY_ALPHA * heat[..., None]
    blended = gray * (1.0 - a) + a * 255.0 * jet(heat)
    return round_half_up(blended)


def save_overlay(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
