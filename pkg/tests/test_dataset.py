import logging

import numpy as np
import pytest

from kneeaug.dataset import (PHANTOM_GAP, REFERENCE_GRADE_COUNTS, BadGrade, DuplicateKnee, ParseError, PhantomNuisance,
                             Sample, TooFewPatients, gap_width, generate_phantom_dataset, grade_counts, load_manifest,
                             preprocess_all, preprocess_image, render_phantom, split_patients,
                             validate_grade_distribution, write_manifest, write_split)
from kneeaug.imagecore import (CorruptFile, GrayImage, equalize_histogram, horizontal_mirror, invert,
                               is_negative_channel, load_image, save_image)


def write_csv(path, rows, header="image_path,patient_id,side,kl_grade"):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows))
    return path


def test_load_manifest_valid(tmp_path):
    m = write_csv(tmp_path / "m.csv", ["a.pgm,P1,Left,0", "b.pgm,P1,Right,3"])
    s = load_manifest(m)
    assert [x.kl_grade for x in s] == [0, 3]
    assert s[0].image_path == str(tmp_path / "a.pgm")
    assert s[1].side == "Right"


def test_load_manifest_bad_grade_line(tmp_path):
    m = write_csv(tmp_path / "m.csv", ["a.pgm,P1,Left,0", "b.pgm,P2,Left,7"])
    with pytest.raises(BadGrade) as info:
        load_manifest(m)
    assert info.value.line == 3


def test_load_manifest_errors(tmp_path):
    with pytest.raises(DuplicateKnee):
        load_manifest(write_csv(tmp_path / "d.csv", ["a,P1,Left,0", "b,P1,Left,1"]))
    assert len(load_manifest(write_csv(tmp_path / "d2.csv", ["a,P1,Left,0", "b,P1,Left,1"]),
                             unique_knees=False)) == 2
    with pytest.raises(ParseError):
        load_manifest(write_csv(tmp_path / "h.csv", [], header="path,pid,side,grade"))
    with pytest.raises(ParseError):
        load_manifest(write_csv(tmp_path / "s.csv", ["a,P1,Middle,0"]))
    with pytest.raises(ParseError):
        load_manifest(write_csv(tmp_path / "f.csv", ["a,P1,Left"]))
    with pytest.raises(BadGrade):
        load_manifest(write_csv(tmp_path / "g.csv", ["a,P1,Left,x"]))


def test_manifest_roundtrip(tmp_path):
    samples = [Sample(str(tmp_path / "img" / f"{i}.pgm"), f"P{i // 2}", ("Left", "Right")[i % 2], i % 5)
               for i in range(6)]
    write_manifest(samples, tmp_path / "m.csv")
    assert load_manifest(tmp_path / "m.csv") == samples
    assert "img/0.pgm" in (tmp_path / "m.csv").read_text()


def test_grade_distribution_validator():
    assert validate_grade_distribution(REFERENCE_GRADE_COUNTS)
    assert sum(REFERENCE_GRADE_COUNTS) == 8260
    assert not validate_grade_distribution((3253, 1495, 2175, 1086, 250))
    samples = [Sample("x", f"P{i}", "Left", g) for i, g in enumerate([0, 0, 4])]
    assert grade_counts(samples) == (2, 0, 0, 0, 1)


def test_preprocess_image_orders():
    px = np.zeros((20, 20), np.uint8)
    px[5:15, 2:8] = 200
    img = GrayImage(px)
    left, inv = preprocess_image(img, "Left")
    assert left == equalize_histogram(img) and not inv
    right, _ = preprocess_image(img, "Right")
    assert right == equalize_histogram(horizontal_mirror(img))
    neg = invert(img)
    assert is_negative_channel(neg)
    fixed, inv = preprocess_image(neg, "Left")
    assert inv and fixed == equalize_histogram(img)


def test_preprocess_all_writes_and_logs(tmp_path, caplog):
    manifest = generate_phantom_dataset(4, 1, tmp_path / "ph", invert_fraction=0.5)
    samples = load_manifest(manifest)
    with caplog.at_level(logging.INFO, logger="kneeaug.dataset"):
        out, images, report = preprocess_all(samples, tmp_path / "pre")
    assert report.n_images == 20 and report.n_mirrored == 10
    assert report.n_inverted == sum(report.inverted_by_grade.values()) > 0
    assert "KL01" in caplog.text and "KL234" in caplog.text
    assert load_image(out[3].image_path) == images[3]
    assert not any(is_negative_channel(i) for i in images)


def test_preprocess_all_error_context(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(CorruptFile, match="sample 0"):
        preprocess_all([Sample(str(bad), "P1", "Left", 0)])


def patients(n, both=True):
    out = []
    for i in range(n):
        out.append(Sample(f"{i}L", f"P{i:03d}", "Left", i % 5))
        if both:
            out.append(Sample(f"{i}R", f"P{i:03d}", "Right", i % 5))
    return out


def test_split_hand_example():
    s = split_patients(patients(10), (0.7, 0.15, 0.15), seed=0)
    assert [len(s.patients(p)) for p in ("train", "val", "test")] == [7, 2, 1]
    again = split_patients(patients(10), (0.7, 0.15, 0.15), seed=0)
    assert s.train == again.train and s.test == again.test


def test_split_keeps_knees_together():
    s = split_patients(patients(40), seed=3)
    seen = {}
    for name, part in s.parts().items():
        for smp in part:
            assert seen.setdefault(smp.patient_id, name) == name


def test_split_errors():
    with pytest.raises(TooFewPatients):
        split_patients(patients(2), seed=0)
    with pytest.raises(ValueError):
        split_patients(patients(10), (0.7, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_patients(patients(10), (1.0, 0.0, 0.0))


def test_write_split(tmp_path):
    s = split_patients(patients(10), seed=1)
    paths = write_split(s, tmp_path)
    assert sorted(paths) == ["test", "train", "val"]
    assert len((tmp_path / "train.csv").read_text().splitlines()) == len(s.train) + 1


def test_gap_narrows_with_grade():
    nz = PhantomNuisance.draw(np.random.default_rng(0))
    widths = [gap_width(g, nz) for g in range(5)]
    assert all(a > b for a, b in zip(widths, widths[1:]))
    assert list(PHANTOM_GAP) == sorted(PHANTOM_GAP, reverse=True)


def test_render_phantom():
    nz = PhantomNuisance.draw(np.random.default_rng(1))
    img = render_phantom(2, nz)
    assert img.shape == (224, 224)
    assert not is_negative_channel(img)
    assert render_phantom(2, nz) == img


def test_generate_phantom_dataset(tmp_path):
    manifest = generate_phantom_dataset(10, 7, tmp_path)
    samples = load_manifest(manifest)
    assert len(samples) == 50 and grade_counts(samples) == (10,) * 5
    assert {s.side for s in samples} == {"Left", "Right"}
    first = load_image(samples[0].image_path)
    generate_phantom_dataset(10, 7, tmp_path / "again")
    assert load_image(load_manifest(tmp_path / "again" / "manifest.csv")[0].image_path) == first
    with pytest.raises(ValueError):
        generate_phantom_dataset(0, 1, tmp_path / "none")


def test_save_in_missing_dir_propagates(tmp_path):
    with pytest.raises(Exception):
        save_image(GrayImage(np.zeros((1, 1), np.uint8)), tmp_path / "a" / "b.pgm")
