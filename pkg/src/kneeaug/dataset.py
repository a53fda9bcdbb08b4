"""Sample manifests, patient-aware splits, preprocessing and synthetic phantoms."""
from __future__ import annotations

import csv
import logging
import os
from collections import Counter
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .imagecore import (GrayImage, ImageError, equalize_histogram, horizontal_mirror, invert, is_negative_channel,
                        load_image, save_image)

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("image_path", "patient_id", "side", "kl_grade")
SIDES = ("Left", "Right")
GRADES = (0, 1, 2, 3, 4)
# per-grade image counts of the reference cohort (KL0..KL4)
REFERENCE_GRADE_COUNTS = (3253, 1495, 2175, 1086, 251)


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class BadGrade(ParseError):
    pass


class DuplicateKnee(ParseError):
    pass


class TooFewPatients(DatasetError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: str
    patient_id: str
    side: str
    kl_grade: int

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be Left or Right, got {self.side!r}")
        if self.kl_grade not in GRADES:
            raise BadGrade(f"kl_grade must be 0..4, got {self.kl_grade}")


def _parse_side(raw):
    v = raw.strip().lower()
    if v in ("left", "l"):
        return "Left"
    if v in ("right", "r"):
        return "Right"
    raise ValueError(f"unknown side {raw!r}")


def load_manifest(path, unique_knees=True) -> list[Sample]:
    """Read ``image_path,patient_id,side,kl_grade`` rows.

    Relative image paths resolve against the manifest's directory. With
    ``unique_knees`` a repeated (patient_id, side) pair is rejected.
    """
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty manifest", 1) from None
        if tuple(h.strip() for h in header[:4]) != MANIFEST_HEADER:
            raise ParseError(f"header must start with {','.join(MANIFEST_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            image_path, patient_id, side, grade = (c.strip() for c in row[:4])
            if not image_path or not patient_id:
                raise ParseError("image_path and patient_id must be non-empty", lineno)
            try:
                side = _parse_side(side)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            try:
                g = int(grade)
            except ValueError:
                raise BadGrade(f"kl_grade {grade!r} is not an integer", lineno) from None
            if g not in GRADES:
                raise BadGrade(f"kl_grade {g} outside 0..4", lineno)
            key = (patient_id, side)
            if unique_knees and key in seen:
                raise DuplicateKnee(f"patient {patient_id} {side} knee already listed on line {seen[key]}", lineno)
            seen[key] = lineno
            if not os.path.isabs(image_path):
                image_path = os.path.join(base, image_path)
            samples.append(Sample(image_path, patient_id, side, g))
    return samples


def write_manifest(samples, path, extra=None) -> None:
    """Write a manifest with image paths relative to its own directory."""
    base = os.path.dirname(os.path.abspath(path))
    extra = extra or {}
    extra_cols = sorted(extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_HEADER) + extra_cols)
        for i, s in enumerate(samples):
            rel = os.path.relpath(s.image_path, base)
            w.writerow([rel, s.patient_id, s.side, s.kl_grade] + [extra[c][i] for c in extra_cols])


def grade_counts(samples) -> tuple[int, ...]:
    c = Counter(s.kl_grade for s in samples)
    return tuple(c.get(g, 0) for g in GRADES)


def validate_grade_distribution(counts, reference=REFERENCE_GRADE_COUNTS) -> bool:
    """True when per-grade counts equal the reference cohort's distribution."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(GRADES) or any(c < 0 for c in counts):
        raise BadGrade(f"expected {len(GRADES)} non-negative grade counts, got {counts}")
    return counts == tuple(reference)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess_image(img: GrayImage, side: str) -> tuple[GrayImage, bool]:
    """Mirror right knees, invert negative-channel images, equalise. Returns (image, inverted)."""
    if side == "Right":
        img = horizontal_mirror(img)
    inverted = is_negative_channel(img)
    if inverted:
        img = invert(img)
    return equalize_histogram(img), inverted


@dataclass
class PreprocessReport:
    n_images: int
    n_mirrored: int
    n_inverted: int
    inverted_by_grade: dict


def preprocess_all(samples, out_dir=None, images=None):
    """Preprocess every sample; writes ``out_dir/<index>.pgm`` when ``out_dir`` is given.

    Returns ``(samples, images, report)``; returned samples point at the derived
    files when written.
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    out_samples, out_images = [], []
    inverted_by_grade = Counter()
    n_mirrored = 0
    for i, s in enumerate(samples):
        try:
            src = images[i] if images is not None else load_image(s.image_path)
        except ImageError as exc:
            raise type(exc)(f"sample {i} ({s.image_path}): {exc}") from exc
        img, inverted = preprocess_image(src, s.side)
        n_mirrored += s.side == "Right"
        if inverted:
            inverted_by_grade[s.kl_grade] += 1
        if out_dir is not None:
            path = os.path.join(out_dir, f"{i:06d}.pgm")
            save_image(img, path)
            s = replace(s, image_path=os.path.abspath(path))
        out_samples.append(s)
        out_images.append(img)
    report = PreprocessReport(len(samples), n_mirrored, sum(inverted_by_grade.values()),
                              {g: inverted_by_grade.get(g, 0) for g in GRADES})
    kl01 = report.inverted_by_grade[0] + report.inverted_by_grade[1]
    log.info("preprocessed %d images: %d mirrored, %d inverted (%d for KL01, %d for KL234)",
             report.n_images, report.n_mirrored, report.n_inverted, kl01, report.n_inverted - kl01)
    return out_samples, out_images, report


# ---------------------------------------------------------------------------
# patient-aware splits
# ---------------------------------------------------------------------------

@dataclass
class SplitDataset:
    train: list
    val: list
    test: list
    fractions: tuple
    seed: int

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def patients(self, part):
        return {s.patient_id for s in getattr(self, part)}


def _check_fractions(fractions):
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"need three positive split fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")


def split_patients(samples, fractions=(0.70, 0.15, 0.15), seed=0) -> SplitDataset:
    """Shuffle patients by seed and fill train, then val, until each sample quota is met.

    All knees of a patient land in the same split; the test split takes the rest.
    """
    fractions = tuple(float(f) for f in fractions)
    _check_fractions(fractions)
    by_patient: dict[str, list] = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s)
    pids = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(pids))
    total = len(samples)
    quotas = [Fraction(str(f)) * total for f in fractions]
    parts: list[list] = [[], [], []]
    current = 0
    for j in order:
        pid = pids[j]
        parts[current].extend(by_patient[pid])
        if current < 2 and len(parts[current]) >= quotas[current]:
            current += 1
    names = ("train", "val", "test")
    for name, part in zip(names, parts):
        if not part:
            raise TooFewPatients(f"{len(pids)} patients cannot fill the {name} split")
    return SplitDataset(parts[0], parts[1], parts[2], fractions, seed)


def write_split(split: SplitDataset, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, part in split.parts().items():
        paths[name] = os.path.join(out_dir, f"{name}.csv")
        write_manifest(part, paths[name])
    return paths


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

PHANTOM_SIZE = 224
# joint-space width (pixels at 224x224) per grade, before nuisance jitter
PHANTOM_GAP = (44.0, 32.0, 21.0, 11.0, 3.0)
# osteophyte radius per grade
PHANTOM_SPUR = (0.0, 6.0, 11.0, 16.0, 21.0)


@dataclass(frozen=True)
class PhantomNuisance:
    dx: float
    dy: float
    bone: float
    background: float
    condyle: float
    texture_seed: int
    gap_jitter: float

    @classmethod
    def draw(cls, rng) -> PhantomNuisance:
        return cls(
            dx=float(rng.uniform(-8, 8)),
            dy=float(rng.uniform(-8, 8)),
            bone=float(rng.uniform(160, 200)),
            background=float(rng.uniform(15, 40)),
            condyle=float(rng.uniform(62, 72)),
            texture_seed=int(rng.integers(0, 2**31)),
            gap_jitter=float(rng.uniform(-1.5, 1.5)),
        )


def gap_width(grade: int, nuisance: PhantomNuisance) -> float:
    return PHANTOM_GAP[grade] + nuisance.gap_jitter


def render_phantom(grade: int, nuisance: PhantomNuisance, size=PHANTOM_SIZE) -> GrayImage:
    """Left-knee phantom: femur above, tibia below, a joint gap narrowing with grade.

    Osteophyte spurs at the joint margins grow with grade; the medial (image
    left) side carries the larger spur and a fibular head sits laterally.
    """
    n = size
    s = n / PHANTOM_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx = n / 2 + nuisance.dx * s
    cy = n / 2 + nuisance.dy * s
    half_gap = gap_width(grade, nuisance) * s / 2
    half = nuisance.condyle * s
    shaft = 0.55 * half

    # femur: shaft narrowing upward, two rounded condyles at the bottom
    fem_bottom = cy - half_gap
    femur = (np.abs(xx - cx) < shaft) & (yy < fem_bottom - 20 * s)
    for off in (-0.5, 0.5):
        ccx = cx + off * half
        femur |= ((xx - ccx) / (0.55 * half)) ** 2 + ((yy - (fem_bottom - 0.45 * half)) / (0.45 * half)) ** 2 < 1
    femur |= (np.abs(xx - cx) < 0.95 * half) & (yy < fem_bottom - 0.45 * half) & (yy > fem_bottom - 1.3 * half) \
        & (np.abs(xx - cx) < shaft + (yy - (fem_bottom - 1.3 * half)) * 0.8)
    # tibia: flat plateau, shaft below
    tib_top = cy + half_gap
    tibia = (np.abs(xx - cx) < 0.95 * half) & (yy > tib_top) & (yy < tib_top + 0.5 * half)
    tibia |= (np.abs(xx - cx) < shaft) & (yy >= tib_top + 0.5 * half)
    tibia |= (np.abs(xx - cx) < shaft + (tib_top + 0.9 * half - yy) * 0.8) & (yy > tib_top) \
        & (yy < tib_top + 0.9 * half)
    fibula = ((xx - (cx + 0.95 * half)) / (0.18 * half)) ** 2 + ((yy - (tib_top + 0.55 * half)) / (0.25 * half)) ** 2 < 1

    bone = femur | tibia | fibula
    spur_r = PHANTOM_SPUR[grade] * s
    if spur_r > 0:
        for side, scale in ((-1, 1.0), (1, 0.7)):
            r = spur_r * scale
            ex = cx + side * 0.95 * half
            for ey in (fem_bottom - 0.2 * half, tib_top + 0.1 * half):
                bone |= ((xx - ex) ** 2 + (yy - ey) ** 2) < r * r

    img = np.full((n, n), nuisance.background)
    img[bone] = nuisance.bone
    # subchondral sclerosis brightens the surfaces near the joint for higher grades
    if grade >= 2:
        band = (np.abs(yy - fem_bottom) < 8 * s) | (np.abs(yy - tib_top) < 8 * s)
        img[bone & band] += 20.0 * (grade - 1)
    tex = np.random.default_rng(nuisance.texture_seed).normal(0.0, 6.0, size=(n, n))
    img = img + tex
    return GrayImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))


def generate_phantom_dataset(n_per_class: int, seed: int, out_dir, invert_fraction=0.05) -> str:
    """Write ``n_per_class`` phantoms per grade plus ``manifest.csv``; returns the manifest path.

    Knees are paired into patients (Left, Right). Right knees are stored
    mirrored and a seeded fraction is stored intensity-inverted, so the
    preprocessing steps have work to do.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    grades = np.repeat(np.arange(5), n_per_class)
    grades = grades[rng.permutation(grades.size)]
    samples = []
    for i, grade in enumerate(grades):
        pid = f"P{i // 2:05d}"
        side = SIDES[i % 2]
        img = render_phantom(int(grade), PhantomNuisance.draw(rng))
        if side == "Right":
            img = horizontal_mirror(img)
        if rng.random() < invert_fraction:
            img = invert(img)
        path = os.path.join(img_dir, f"{pid}_{side[0]}.pgm")
        save_image(img, path)
        samples.append(Sample(os.path.abspath(path), pid, side, int(grade)))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(samples, manifest)
    return manifest
