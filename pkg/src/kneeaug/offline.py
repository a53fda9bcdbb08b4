"""Offline base augmentations: the 18 positive/negative conditions.

Every transform takes a :class:`GrayImage` and returns a list of images
sized like the input. Split-type conditions return two images, all others one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .imagecore import GrayImage, resize_bilinear, round_half_up


class AugmentationError(ValueError):
    pass


class DegenerateRoi(AugmentationError):
    pass


class GridTooFine(AugmentationError):
    pass


class UnknownCondition(AugmentationError):
    pass


POSITIVE = "positive"
NEGATIVE = "negative"

NOISE_LEVELS = (0.05, 0.10, 0.20, 0.50)
CUBE_GRIDS = (2, 3, 6)


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def _round_exact(q: Fraction) -> int:
    # round half up on an exact rational
    return int((q + Fraction(1, 2)).__floor__())


@dataclass(frozen=True)
class RoiSpec:
    """Centred horizontal band covering ``center_fraction`` of the height."""

    center_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.center_fraction < 1:
            raise ValueError(f"center_fraction must be in (0, 1), got {self.center_fraction}")

    def rows(self, height: int) -> tuple[int, int]:
        f = _exact(self.center_fraction)
        lo = _round_exact(height * (Fraction(1, 2) - f / 2))
        hi = _round_exact(height * (Fraction(1, 2) + f / 2))
        return lo, hi


@dataclass(frozen=True)
class SplitSpec:
    """Two pieces (top, bottom) sharing ``overlap`` of the height."""

    overlap: float = 0.20
    flip_second: bool = False

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")

    def piece_height(self, height: int) -> int:
        return _round_exact(height * (Fraction(1, 2) + _exact(self.overlap) / 2))

    def rows(self, height: int) -> tuple[tuple[int, int], tuple[int, int]]:
        p = self.piece_height(height)
        return (0, p), (height - p, height)


def _fit(px: np.ndarray, like: GrayImage) -> GrayImage:
    return resize_bilinear(GrayImage(px), like.width, like.height)


def baseline(img: GrayImage) -> list[GrayImage]:
    return [GrayImage(img.pixels.copy())]


def baseline_rotated(img: GrayImage, quarter_turns: int = 1) -> list[GrayImage]:
    """Counter-clockwise rotation by ``90 * quarter_turns`` degrees."""
    return [_fit(np.rot90(img.pixels, quarter_turns), img)]


def _roi_band(img: GrayImage, spec: RoiSpec) -> np.ndarray:
    lo, hi = spec.rows(img.height)
    if hi - lo < 1:
        raise DegenerateRoi(f"ROI band is empty for height {img.height}")
    return img.pixels[lo:hi]


def roi_crop(img: GrayImage, spec: RoiSpec = RoiSpec()) -> list[GrayImage]:
    return [_fit(_roi_band(img, spec), img)]


def _split_pieces(px: np.ndarray, spec: SplitSpec) -> list[np.ndarray]:
    (t0, t1), (b0, b1) = spec.rows(px.shape[0])
    if t1 < 1:
        raise DegenerateRoi(f"split piece is empty for height {px.shape[0]}")
    top, bottom = px[t0:t1], px[b0:b1]
    if spec.flip_second:
        bottom = bottom[::-1]
    return [top, bottom]


def horizontal_split(img: GrayImage, spec: SplitSpec = SplitSpec()) -> list[GrayImage]:
    return [_fit(piece, img) for piece in _split_pieces(img.pixels, spec)]


def roi_split(img: GrayImage, roi: RoiSpec = RoiSpec(),
              split: SplitSpec = SplitSpec(0.20)) -> list[GrayImage]:
    band = _roi_band(img, roi)
    return [_fit(piece, img) for piece in _split_pieces(band, split)]


# ---------------------------------------------------------------------------
# counter-based gaussian noise
# ---------------------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _uniform53(bits: np.ndarray) -> np.ndarray:
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def standard_normal_field(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Standard normals where element ``i`` depends only on ``(seed, offset + i)``.

    Box-Muller over two splitmix64 streams of the key.
    """
    key = _splitmix64(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = key ^ (idx * np.uint64(0xD1B54A32D192ED03))
        u1 = 1.0 - _uniform53(_splitmix64(base))  # (0, 1]
        u2 = _uniform53(_splitmix64(base ^ np.uint64(0x6A09E667F3BCC909)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def noise_field(shape, level: float, seed: int) -> np.ndarray:
    """Additive noise with standard deviation ``level * 255``."""
    n = int(np.prod(shape))
    return (level * 255.0) * standard_normal_field(seed, n).reshape(shape)


def add_gaussian_noise(img: GrayImage, level: float, seed: int) -> list[GrayImage]:
    if level == 0:
        return [GrayImage(img.pixels.copy())]
    noisy = img.pixels.astype(np.float64) + noise_field(img.shape, level, seed)
    return [GrayImage(round_half_up(noisy))]


# ---------------------------------------------------------------------------
# tile shuffling and ROI removal
# ---------------------------------------------------------------------------

def tile_bounds(n: int, grid: int) -> list[tuple[int, int]]:
    """Equal tiles of ``n // grid`` pixels; the last absorbs the remainder."""
    size = n // grid
    bounds = [(i * size, (i + 1) * size) for i in range(grid)]
    bounds[-1] = (bounds[-1][0], n)
    return bounds


def cube_shuffle(img: GrayImage, grid: int, seed: int) -> list[GrayImage]:
    """Seeded permutation of grid x grid tiles within equal-size classes."""
    if grid < 1 or grid > min(img.width, img.height):
        raise GridTooFine(f"grid {grid} too fine for {img.width}x{img.height}")
    rows = tile_bounds(img.height, grid)
    cols = tile_bounds(img.width, grid)
    classes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            classes.setdefault((r1 - r0, c1 - c0), []).append((i, j))
    rng = np.random.default_rng(seed)
    src = img.pixels
    out = np.empty_like(src)
    for key in sorted(classes):
        positions = classes[key]
        perm = rng.permutation(len(positions))
        for dst_pos, src_k in zip(positions, perm):
            (i, j), (si, sj) = dst_pos, positions[src_k]
            out[rows[i][0]:rows[i][1], cols[j][0]:cols[j][1]] = \
                src[rows[si][0]:rows[si][1], cols[sj][0]:cols[sj][1]]
    return [GrayImage(out)]


def _non_roi_parts(img: GrayImage, roi: RoiSpec) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = roi.rows(img.height)
    if lo < 1 or img.height - hi < 1:
        raise DegenerateRoi(f"a non-ROI part is empty for height {img.height}")
    return img.pixels[:lo], img.pixels[hi:]


def no_roi(img: GrayImage, roi: RoiSpec = RoiSpec()) -> list[GrayImage]:
    upper, lower = _non_roi_parts(img, roi)
    return [_fit(np.vstack([upper, lower]), img)]


def no_roi_split(img: GrayImage, roi: RoiSpec = RoiSpec()) -> list[GrayImage]:
    upper, lower = _non_roi_parts(img, roi)
    return [_fit(upper, img), _fit(lower, img)]


# ---------------------------------------------------------------------------
# condition registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationCondition:
    name: str
    seed: int = 0
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.name not in CONDITIONS:
            raise UnknownCondition(f"unknown condition {self.name!r}")

    @property
    def kind(self) -> str:
        return CONDITIONS[self.name].kind

    @property
    def label(self) -> str:
        return CONDITIONS[self.name].label


@dataclass(frozen=True)
class _Entry:
    label: str
    kind: str
    outputs: int
    run: Callable


def _roi(p):
    return RoiSpec(p.get("roi_fraction", 0.5))


def _noise(level):
    return lambda img, p, seed: add_gaussian_noise(img, level, seed)


def _cube(grid):
    return lambda img, p, seed: cube_shuffle(img, grid, seed)


def _hsplit(overlap, flip):
    return lambda img, p, seed: horizontal_split(img, SplitSpec(overlap, flip))


def _roi_split(flip):
    return lambda img, p, seed: roi_split(img, _roi(p), SplitSpec(0.20, flip))


CONDITIONS: dict[str, _Entry] = {
    "baseline": _Entry("Baseline", POSITIVE, 1, lambda img, p, seed: baseline(img)),
    "baseline_rotated": _Entry("Baseline Rotated", POSITIVE, 1,
                               lambda img, p, seed: baseline_rotated(img, p.get("quarter_turns", 1))),
    "roi": _Entry("ROI", POSITIVE, 1, lambda img, p, seed: roi_crop(img, _roi(p))),
    "hsplit20": _Entry("Horizontal Split 20%", POSITIVE, 2, _hsplit(0.20, False)),
    "hsplit20_flip": _Entry("Horizontal Split 20% Flip", POSITIVE, 2, _hsplit(0.20, True)),
    "hsplit05": _Entry("Horizontal Split", POSITIVE, 2, _hsplit(0.05, False)),
    "hsplit05_flip": _Entry("Horizontal Split Flip", POSITIVE, 2, _hsplit(0.05, True)),
    "roi_split": _Entry("ROI Split", POSITIVE, 2, _roi_split(False)),
    "roi_split_flip": _Entry("ROI Split Flip", POSITIVE, 2, _roi_split(True)),
    "noise05": _Entry("Noise 05", NEGATIVE, 1, _noise(0.05)),
    "noise10": _Entry("Noise 10", NEGATIVE, 1, _noise(0.10)),
    "noise20": _Entry("Noise 20", NEGATIVE, 1, _noise(0.20)),
    "noise50": _Entry("Noise 50", NEGATIVE, 1, _noise(0.50)),
    "cube2": _Entry("Cube 2", NEGATIVE, 1, _cube(2)),
    "cube3": _Entry("Cube 3", NEGATIVE, 1, _cube(3)),
    "cube6": _Entry("Cube 6", NEGATIVE, 1, _cube(6)),
    "no_roi": _Entry("No ROI", NEGATIVE, 1, lambda img, p, seed: no_roi(img, _roi(p))),
    "no_roi_split": _Entry("No ROI Split", NEGATIVE, 2, lambda img, p, seed: no_roi_split(img, _roi(p))),
}

CONDITION_NAMES = tuple(CONDITIONS)


def apply_condition(img: GrayImage, cond: AugmentationCondition | str, seed: int | None = None) -> list[GrayImage]:
    """Run one named condition. ``seed`` overrides ``cond.seed`` when given."""
    if isinstance(cond, str):
        cond = AugmentationCondition(cond, 0 if seed is None else seed)
    entry = CONDITIONS.get(cond.name)
    if entry is None:
        raise UnknownCondition(f"unknown condition {cond.name!r}")
    return entry.run(img, cond.params, cond.seed if seed is None else seed)


def outputs_per_image(name: str) -> int:
    if name not in CONDITIONS:
        raise UnknownCondition(f"unknown condition {name!r}")
    return CONDITIONS[name].outputs
