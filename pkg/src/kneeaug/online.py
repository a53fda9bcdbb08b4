"""Random affine augmentation applied per sample during training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .imagecore import GrayImage, round_half_up


@dataclass(frozen=True)
class AffinePolicy:
    max_rotation_deg: float = 40.0
    max_shift_px: float = 45.0
    max_shear: float = 0.2
    max_zoom: float = 0.20
    allow_hflip: bool = True
    fill_mode: str = "nearest"

    def __post_init__(self):
        for name in ("max_rotation_deg", "max_shift_px", "max_shear", "max_zoom"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_zoom >= 1:
            raise ValueError("max_zoom must be below 1")
        if self.fill_mode != "nearest":
            raise ValueError("only nearest-edge fill is supported")

    @classmethod
    def identity(cls) -> AffinePolicy:
        return cls(0.0, 0.0, 0.0, 0.0, False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AffinePolicy:
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.name == "allow_hflip":
                    v = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
                elif f.name != "fill_mode":
                    v = float(v)
                kw[f.name] = v
        return cls(**kw)


@dataclass(frozen=True)
class AffineDraw:
    rotation_deg: float = 0.0
    shift_x_px: float = 0.0
    shift_y_px: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    hflip: bool = False

    @property
    def is_identity(self) -> bool:
        return self == AffineDraw()


def draw_affine(policy: AffinePolicy, seed: int, sample_id: int, epoch: int) -> AffineDraw:
    """Uniform draw of every parameter, keyed by ``(seed, sample_id, epoch)``."""
    rng = np.random.default_rng([int(seed), int(sample_id), int(epoch)])
    u = rng.uniform(-1.0, 1.0, size=5)
    flip = rng.random() < 0.5
    return AffineDraw(
        rotation_deg=float(u[0] * policy.max_rotation_deg),
        shift_x_px=float(u[1] * policy.max_shift_px),
        shift_y_px=float(u[2] * policy.max_shift_px),
        shear=float(u[3] * policy.max_shear),
        zoom=float(1.0 + u[4] * policy.max_zoom),
        hflip=bool(policy.allow_hflip and flip),
    )


def _factors(draw: AffineDraw):
    t = math.radians(draw.rotation_deg)
    c, s = math.cos(t), math.sin(t)
    return t, c, s


def forward_matrix(draw: AffineDraw) -> np.ndarray:
    """3x3 forward map on centred (x, y) pixel coordinates, y pointing down.

    Composition order: flip, rotate, shear, zoom, translate.
    """
    _, c, s = _factors(draw)
    flip = np.diag([-1.0 if draw.hflip else 1.0, 1.0, 1.0])
    # counter-clockwise on screen with the y axis pointing down
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, draw.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zoom = np.diag([draw.zoom, draw.zoom, 1.0])
    shift = np.array([[1.0, 0.0, draw.shift_x_px], [0.0, 1.0, draw.shift_y_px], [0.0, 0.0, 1.0]])
    return shift @ zoom @ shear @ rot @ flip


def inverse_matrix(draw: AffineDraw) -> np.ndarray:
    """Inverse of :func:`forward_matrix`, built factor by factor.

    Identity factors stay exactly the identity, so pure flips and integer
    shifts resample without interpolation error.
    """
    _, c, s = _factors(draw)
    flip = np.diag([-1.0 if draw.hflip else 1.0, 1.0, 1.0])
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, -draw.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zoom = np.diag([1.0 / draw.zoom, 1.0 / draw.zoom, 1.0])
    shift = np.array([[1.0, 0.0, -draw.shift_x_px], [0.0, 1.0, -draw.shift_y_px], [0.0, 0.0, 1.0]])
    return flip @ rot @ shear @ zoom @ shift


def apply_affine(img: GrayImage, draw: AffineDraw) -> GrayImage:
    """Single-pass bilinear warp of ``img`` by the composed draw."""
    if draw.is_identity:
        return img
    warped = kernels.affine_warp(img.pixels, inverse_matrix(draw)[:2])
    return GrayImage(round_half_up(warped))
