"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from conftest import random_image
from gradcheck import RTOL, STEP, check_layer
from kneeaug.dataset import (REFERENCE_GRADE_COUNTS, BadGrade, Sample, TooFewPatients, generate_phantom_dataset,
                             load_manifest, split_patients, validate_grade_distribution, write_manifest)
from kneeaug.experiment import RunConfig, run_sweep
from kneeaug.gradcam import extraction_index, gradcam_from_tensor
from kneeaug.imagecore import GrayImage, equalize_histogram, resize_bilinear
from kneeaug.metrics import confusion, prf1, roc_curve
from kneeaug.nn import (Conv2D, Dense, Flatten, FusedMBConv, LayerStack, MaxPool2D, MBConv, ScalingConfig,
                        SqueezeExcite, build_network, softmax_cross_entropy)
from kneeaug.nn.layers import conv_output_dim, pool_output_dim
from kneeaug.offline import (CONDITION_NAMES, RoiSpec, SplitSpec, add_gaussian_noise, cube_shuffle,
                             horizontal_split, no_roi, no_roi_split, noise_field, roi_crop, tile_bounds)


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_equalization(criterion):
    rng = np.random.default_rng(1)
    with criterion(1, "equalization examples, idempotence and order", 5):
        assert equalize_histogram(GrayImage.from_list(2, 2, [0, 0, 255, 255])).tolist() == [0, 0, 255, 255]
        assert equalize_histogram(GrayImage.from_list(2, 2, [10, 20, 20, 30])).tolist() == [0, 170, 170, 255]
        for _ in range(1000):
            img = random_image(rng, high=int(rng.integers(1, 257)))
            out = equalize_histogram(img).pixels.astype(int)
            twice = equalize_histogram(GrayImage(out.astype(np.uint8))).pixels.astype(int)
            assert np.abs(twice - out).max() <= 1
            src = img.pixels.ravel().astype(int)
            order = np.argsort(src, kind="stable")
            assert np.all(np.diff(out.ravel()[order]) >= 0)


# -- 2 ------------------------------------------------------------------------

def _band(h, f):
    """Centred band [lo, hi) with round-half-up, integer arithmetic only."""
    q = Fraction(f).limit_denominator(10_000)
    a, b = q.numerator, q.denominator
    return (h * (b - a) + b) // (2 * b), (h * (b + a) + b) // (2 * b)


def _piece(h, overlap):
    q = Fraction(overlap).limit_denominator(10_000)
    c, d = q.numerator, q.denominator
    return (h * (d + c) + d) // (2 * d)


def _clipped_std(sigma, mid=128):
    """Std of clip(round(mid + n), 0, 255) - mid for n ~ N(0, sigma^2), by exact summation."""
    def cdf(x):
        return 0.5 * (1 + math.erf(x / (sigma * math.sqrt(2))))
    vals = np.arange(256) - mid
    p = np.array([cdf(v + 0.5) - cdf(v - 0.5) for v in vals])
    p[0] = cdf(0.5 - mid)
    p[-1] = 1 - cdf(255 - mid - 0.5)
    mean = float((p * vals).sum())
    return math.sqrt(float((p * (vals - mean) ** 2).sum()))


def test_criterion_2_transform_geometry(criterion):
    rng = np.random.default_rng(2)
    with criterion(2, "row ranges, tile multisets and noise sigma", 30):
        for h in range(4, 225):
            img = GrayImage(rng.integers(0, 256, (h, 3)).astype(np.uint8))
            lo, hi = _band(h, 0.5)
            assert RoiSpec(0.5).rows(h) == (lo, hi)
            assert roi_crop(img)[0] == resize_bilinear(GrayImage(img.pixels[lo:hi]), 3, h)
            assert no_roi(img)[0] == resize_bilinear(GrayImage(np.vstack([img.pixels[:lo], img.pixels[hi:]])), 3, h)
            up, down = no_roi_split(img)
            assert up == resize_bilinear(GrayImage(img.pixels[:lo]), 3, h)
            assert down == resize_bilinear(GrayImage(img.pixels[hi:]), 3, h)
            for ov in (0.20, 0.05):
                p = _piece(h, ov)
                assert SplitSpec(ov).rows(h) == ((0, p), (h - p, h))
                top, bottom = horizontal_split(img, SplitSpec(ov))
                assert top == resize_bilinear(GrayImage(img.pixels[:p]), 3, h)
                assert bottom == resize_bilinear(GrayImage(img.pixels[h - p:]), 3, h)
        assert _band(224, 0.5) == (56, 168) and _band(4, 0.5) == (1, 3)
        assert _piece(224, 0.2) == 134 and _piece(224, 0.05) == 118 and _piece(112, 0.2) == 67

        for i in range(500):
            grid = (2, 3, 6)[i % 3]
            img = random_image(rng, int(rng.integers(grid, 60)), int(rng.integers(grid, 60)))
            out = cube_shuffle(img, grid, int(rng.integers(2**63)))[0].pixels
            assert np.array_equal(np.sort(out.ravel()), np.sort(img.pixels.ravel()))
            rows, cols = tile_bounds(img.height, grid), tile_bounds(img.width, grid)
            tiles = sorted(img.pixels[a:b, c:d].tobytes() for (a, b), (c, d) in product(rows, cols))
            moved = sorted(out[a:b, c:d].tobytes() for (a, b), (c, d) in product(rows, cols))
            assert tiles == moved

        gray = GrayImage(np.full((224, 224), 128, np.uint8))
        for level in (0.05, 0.10, 0.20, 0.50):
            sigma = level * 255
            expect = _clipped_std(sigma)
            for seed in range(10):
                raw = noise_field((224, 224), level, seed).std()
                assert abs(raw - sigma) <= 0.1 * sigma
                sd = (add_gaussian_noise(gray, level, seed)[0].pixels.astype(float) - 128).std()
                assert abs(sd - expect) <= 0.1 * expect
                if level <= 0.2:
                    assert abs(sd - sigma) <= 0.1 * sigma


# -- 3 ------------------------------------------------------------------------

def _randomize(layer, rng):
    for p in layer.params.values():
        p[...] = rng.standard_normal(p.shape) * 0.5
    return layer


def _conv(r):
    g = int(r.integers(1, 3))
    return Conv2D(g * int(r.integers(1, 3)), g * int(r.integers(1, 3)), int(r.integers(1, 4)),
                  int(r.integers(1, 3)), padding=("same", "valid")[int(r.integers(2))], groups=g, rng=r)


def _block(cls):
    def make(r):
        stride = int(r.integers(1, 3))
        return cls(2, 2, 2, 3, stride, 2, stride == 1, rng=r)
    return make


LAYERS = {
    "conv": _conv,
    "dense": lambda r: Dense(int(r.integers(1, 8)), int(r.integers(1, 6)), rng=r),
    "se": lambda r: SqueezeExcite(int(r.integers(2, 6)), int(r.integers(1, 3)), rng=r),
    "mbconv": _block(MBConv),
    "fused": _block(FusedMBConv),
    "pool": lambda r: MaxPool2D(int(r.integers(1, 4)), int(r.integers(1, 3))),
}


def _input_for(layer, rng):
    n = int(rng.integers(1, 3))
    if isinstance(layer, Dense):
        return rng.normal(size=(n, layer.params["w"].shape[0]))
    ch = layer.in_ch if hasattr(layer, "in_ch") else (layer.channels if hasattr(layer, "channels") else 2)
    return rng.normal(size=(n, ch, int(rng.integers(4, 7)), int(rng.integers(4, 7))))


def test_criterion_3_nn_numerics(criterion):
    rng = np.random.default_rng(3)
    with criterion(3, "layer gradient checks and shape formulas", 120):
        for name, make in LAYERS.items():
            checked = 0
            for _ in range(100):
                layer = make(rng)
                if layer.params:
                    _randomize(layer, rng)
                worst, n, _ = check_layer(layer, _input_for(layer, rng), rng, n_probes=4)
                assert worst <= RTOL, (name, worst)
                checked += n
            assert checked >= 100 * 2, name
        for _ in range(100):
            logits = rng.normal(size=(3, 5)) * 3
            labels = rng.integers(0, 5, 3)
            _, g = softmax_cross_entropy(logits, labels)
            for i, j in product(range(3), range(5)):
                e = np.zeros_like(logits)
                e[i, j] = STEP
                num = (softmax_cross_entropy(logits + e, labels)[0]
                       - softmax_cross_entropy(logits - e, labels)[0]) / (2 * STEP)
                assert abs(num - g[i, j]) <= RTOL * max(abs(num), abs(g[i, j]), 1e-6)
        for u in range(1, 33):
            x = np.zeros((1, 1, u, u))
            for k in range(1, u + 1):
                conv = Conv2D(1, 1, k, 1, padding="valid")
                for s in range(1, u + 1):
                    conv.stride = s
                    expect = (u - k) // s + 1
                    assert conv_output_dim(u, k, s) == pool_output_dim(u, k, s) == expect
                    assert conv.forward(x)[0].shape[2:] == (expect, expect)
                    assert MaxPool2D(k, s).forward(x)[0].shape[2:] == (expect, expect)


# -- 4 ------------------------------------------------------------------------

def _linear_head_net(c, h, w):
    conv = Conv2D(1, 1, 1)
    conv.params["w"][...] = 1.0
    dense = Dense(h * w, 2)
    dense.params["w"][...] = 0.0
    dense.params["w"][:, 0] = c / (h * w)
    return LayerStack([conv, Flatten(), dense], (1, h, w))


def _fd_weights(net, x, target):
    k = extraction_index(net)
    psi = x
    for layer in net.layers[:k]:
        psi = layer.forward(psi)[0]

    def logit(p):
        for layer in net.layers[k:]:
            p = layer.forward(p)[0]
        return p[0, target]

    out = np.zeros(psi.shape[1])
    for idx in np.ndindex(psi.shape[1:]):
        e = np.zeros_like(psi)
        e[(0,) + idx] = STEP
        out[idx[0]] += (logit(psi + e) - logit(psi - e)) / (2 * STEP)
    return out / (psi.shape[2] * psi.shape[3])


def test_criterion_4_gradcam(criterion):
    rng = np.random.default_rng(4)
    with criterion(4, "grad-cam algebra, finite differences and normalization", 60):
        c = 1.7
        x = rng.normal(size=(1, 1, 4, 5))
        res = gradcam_from_tensor(_linear_head_net(c, 4, 5), x, 0)
        assert np.abs(res.weights - c / 20).max() <= 1e-6
        assert np.abs(res.map - (c / 20) * np.maximum(x[0, 0], 0)).max() <= 1e-6
        for i in range(100):
            net = build_network(ScalingConfig(w0=4, r0=16), seed=i, dense_units=16)
            img = rng.uniform(size=(1, 1, 16, 16))
            target = int(rng.integers(0, 5))
            res = gradcam_from_tensor(net, img, target, out_shape=(20, 24))
            up = res.upsampled
            assert up.shape == (20, 24)
            assert up.min() >= 0 and res.map.min() >= 0
            assert up.max() == 0 or abs(up.max() - 1) <= 1e-12
            if res.map.max() > 0:
                assert up.max() == 1.0
            if i < 10:
                num = _fd_weights(net, img, target)
                err = np.abs(num - res.weights) / np.maximum(np.maximum(np.abs(num), np.abs(res.weights)), 1e-6)
                assert err.max() <= 1e-4


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_metrics(criterion):
    rng = np.random.default_rng(5)
    with criterion(5, "prf1 brute force and AUC vs Mann-Whitney", 30):
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            y, p = rng.integers(0, 5, n), rng.integers(0, 5, n)
            s = prf1(confusion(y, p))
            assert s.accuracy == sum(int(a == b) for a, b in zip(y, p)) / n
            present, precs, recs, f1s = [], [], [], []
            for k in range(5):
                tp = sum(1 for a, b in zip(y, p) if a == k and b == k)
                fp = sum(1 for a, b in zip(y, p) if a != k and b == k)
                fn = sum(1 for a, b in zip(y, p) if a == k and b != k)
                pr = tp / (tp + fp) if tp + fp else 0.0
                rc = tp / (tp + fn) if tp + fn else 0.0
                f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
                c = s.per_class[k]
                assert (c.tp, c.fp, c.fn) == (tp, fp, fn)
                assert abs(c.precision - pr) < 1e-12 and abs(c.recall - rc) < 1e-12 and abs(c.f1 - f1) < 1e-12
                if k in y or k in p:
                    precs.append(pr), recs.append(rc), f1s.append(f1)
            assert abs(s.precision - np.mean(precs)) < 1e-12
            assert abs(s.recall - np.mean(recs)) < 1e-12
            assert abs(s.f1 - np.mean(f1s)) < 1e-12
        for i in range(200):
            n = int(rng.integers(2, 80))
            scores = rng.integers(0, int(rng.integers(2, 12)), n) / 10.0
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            pos, neg = scores[labels == 1], scores[labels == 0]
            oracle = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))
            assert abs(roc_curve(scores, labels).auc - oracle) <= 1e-9


# -- 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_sweep_determinism(criterion, tmp_path):
    with criterion(6, "two 18-condition phantom sweeps are byte-identical", 20 * 60):
        manifest = str(generate_phantom_dataset(60, 77, tmp_path / "ph"))
        outputs = []
        for name in ("a", "b"):
            cfg = RunConfig(manifest=manifest, out_dir=str(tmp_path / name), epochs=3, lr=3e-3, batch_size=8,
                            scaling=ScalingConfig(r0=32), gradcam_top_n=1, init_seed=1, split_seed=1,
                            augment_seed=1)
            results, failures, path = run_sweep(CONDITION_NAMES, cfg)
            assert not failures and len(results) == 18
            outputs.append(open(path, "rb").read())
        assert outputs[0] == outputs[1]
        assert len(outputs[0].splitlines()) == 19


# -- 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_noise_ordering(criterion, tmp_path):
    with criterion(7, "noise05 accuracy >= noise50 in at least 9 of 10 repetitions", None) as c:
        wins, rows = 0, []
        for rep in range(10):
            manifest = str(generate_phantom_dataset(60, 1000 + rep, tmp_path / f"ph{rep}"))
            cfg = RunConfig(manifest=manifest, out_dir=str(tmp_path / f"rep{rep}"), epochs=5, lr=3e-3,
                            batch_size=8, scaling=ScalingConfig(r0=48), gradcam_top_n=0, init_seed=rep,
                            split_seed=rep, augment_seed=rep)
            results, failures, _ = run_sweep(["noise05", "noise50"], cfg)
            assert not failures
            acc = {r.condition: r.accuracy for r in results}
            wins += acc["noise05"] >= acc["noise50"]
            rows.append(f"{acc['noise05']:.3f}/{acc['noise50']:.3f}")
        c.detail = f" [{wins}/10: " + " ".join(rows) + "]"
        assert wins >= 9


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_grade_validator(criterion, tmp_path):
    with criterion(8, "grade distribution validator", 1):
        assert validate_grade_distribution((3253, 1495, 2175, 1086, 251))
        assert tuple(REFERENCE_GRADE_COUNTS) == (3253, 1495, 2175, 1086, 251)
        assert sum(REFERENCE_GRADE_COUNTS) == 8260
        assert not validate_grade_distribution((3253, 1495, 2175, 1086, 252))
        for bad in ("5", "-1", "7", "2.5", "x"):
            path = tmp_path / f"m{bad}.csv"
            path.write_text(f"image_path,patient_id,side,kl_grade\na.pgm,P1,Left,0\nb.pgm,P2,Left,{bad}\n")
            with pytest.raises(BadGrade):
                load_manifest(path)
        ok = tmp_path / "ok.csv"
        write_manifest([Sample(f"{g}.pgm", f"P{g}", "Left", g) for g in range(5)], ok)
        assert len(load_manifest(ok)) == 5


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_split_integrity(criterion):
    rng = np.random.default_rng(9)
    with criterion(9, "patient-aware splits over 1000 manifests", 30) as c:
        done = skipped = 0
        for _ in range(1000):
            n = int(rng.integers(15, 61))
            samples = []
            for i in range(n):
                sides = ("Left", "Right") if rng.random() < 0.8 else (("Left", "Right")[int(rng.integers(2))],)
                for side in sides:
                    samples.append(Sample(f"{i}{side}.pgm", f"P{i:04d}", side, int(rng.integers(0, 5))))
            a = float(rng.uniform(0.5, 0.8))
            b = float(rng.uniform(0.05, 1 - a - 0.05))
            try:
                split = split_patients(samples, (a, b, 1 - a - b), int(rng.integers(2**32)))
            except TooFewPatients:
                skipped += 1
                continue
            owner = {}
            for name, part in split.parts().items():
                for s in part:
                    assert owner.setdefault(s.patient_id, name) == name
            assert sum(len(p) for p in split.parts().values()) == len(samples)
            done += 1
        c.detail = f" [{done} split, {skipped} too small]"
        assert done >= 900
