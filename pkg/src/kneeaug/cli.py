"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import accel
from .dataset import (DatasetError, generate_phantom_dataset, grade_counts, load_manifest, preprocess_all,
                      split_patients, validate_grade_distribution, write_manifest, write_split)
from .experiment import (ConfigError, ExperimentError, RunConfig, collect_reports, image_seed, parse_flat_config,
                         run_experiment, run_sweep, summary_csv, write_gradcams)
from .gradcam import compute_gradcam, render_overlay, save_overlay
from .imagecore import ImageError, load_image, save_image
from .metrics import METRICS_HEADER, confusion, metrics_row, per_class_csv, prf1
from .nn.layers import NNError
from .nn.network import build_network, predict_proba
from .nn.train import ImageSet, TrainingData, load_checkpoint, save_checkpoint, to_tensor, train
from .offline import CONDITION_NAMES, AugmentationCondition, AugmentationError, apply_condition
from .online import AffinePolicy

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("kneeaug")

VALIDATION_ERRORS = (ConfigError, DatasetError, AugmentationError, ValueError, KeyError)


def _add_seed(p, *names):
    for name in names:
        p.add_argument(f"--{name.replace('_', '-')}", type=int, default=None, help=f"{name} (default 0)")


def _add_run_flags(p):
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--condition", choices=CONDITION_NAMES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--fractions", help="train,val,test e.g. 0.7,0.15,0.15")
    p.add_argument("--augment-eval-splits", choices=("true", "false"),
                   help="apply the base condition to val/test too (default true)")
    p.add_argument("--gradcam-top-n", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--r0", type=int)
    p.add_argument("--w0", type=int)
    p.add_argument("--d0", type=int)
    p.add_argument("--no-affine", action="store_true", help="disable online affine augmentation")
    _add_seed(p, "init_seed", "split_seed", "augment_seed")


def _config_from_args(args) -> RunConfig:
    d = {}
    if args.config:
        d.update(parse_flat_config(args.config))
    mapping = {"manifest": "manifest", "out": "out_dir", "condition": "condition", "epochs": "epochs",
               "lr": "lr", "batch_size": "batch_size", "fractions": "fractions",
               "augment_eval_splits": "augment_eval_splits", "gradcam_top_n": "gradcam_top_n",
               "phi": "phi", "r0": "r0", "w0": "w0", "d0": "d0", "init_seed": "init_seed",
               "split_seed": "split_seed", "augment_seed": "augment_seed"}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    if getattr(args, "no_affine", False):
        d.update(max_rotation_deg=0, max_shift_px=0, max_shear=0, max_zoom=0, allow_hflip="false")
    cfg = RunConfig.from_mapping(d)
    if not cfg.manifest:
        raise ConfigError("a manifest is required (--manifest or manifest= in --config)")
    return cfg.validate()


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    path = generate_phantom_dataset(args.n_per_class, args.seed, args.out)
    print(path)


def cmd_preprocess(args):
    samples = load_manifest(args.manifest)
    out_samples, _, report = preprocess_all(samples, os.path.join(args.out, "images"))
    manifest = os.path.join(args.out, "manifest.csv")
    write_manifest(out_samples, manifest)
    kl01 = report.inverted_by_grade[0] + report.inverted_by_grade[1]
    print(f"preprocessed {report.n_images} images; mirrored {report.n_mirrored}; "
          f"inverted {report.n_inverted} ({kl01} KL01, {report.n_inverted - kl01} KL234)")
    print(manifest)


def cmd_augment(args):
    samples = load_manifest(args.manifest)
    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    out_samples, parts = [], []
    for i, s in enumerate(samples):
        cond = AugmentationCondition(args.condition, image_seed(args.seed, 0, i),
                                     {"roi_fraction": args.roi_fraction})
        for j, img in enumerate(apply_condition(load_image(s.image_path), cond)):
            path = os.path.join(img_dir, f"{i:06d}_{j}.pgm")
            save_image(img, path)
            out_samples.append(type(s)(os.path.abspath(path), s.patient_id, s.side, s.kl_grade))
            parts.append(j)
    manifest = os.path.join(args.out, "manifest.csv")
    write_manifest(out_samples, manifest, extra={"part": parts})
    print(f"{args.condition}: {len(samples)} source images -> {len(out_samples)} outputs")
    print(manifest)


def cmd_split(args):
    samples = load_manifest(args.manifest)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    split = split_patients(samples, fractions, args.seed)
    paths = write_split(split, args.out)
    for name, part in split.parts().items():
        print(f"{name}: {len(part)} images, {len(split.patients(name))} patients -> {paths[name]}")


def cmd_validate(args):
    samples = load_manifest(args.manifest)
    counts = grade_counts(samples)
    print("grade counts: " + " ".join(f"KL{g}={c}" for g, c in enumerate(counts)) + f" total={sum(counts)}")
    if args.reference:
        ok = validate_grade_distribution(counts)
        print("matches reference distribution" if ok else "does not match reference distribution")
        return EXIT_OK if ok else EXIT_VALIDATION
    return EXIT_OK


def _labelled_images(manifest):
    samples = load_manifest(manifest, unique_knees=False)
    images = [load_image(s.image_path) for s in samples]
    ids = [f"{s.patient_id}:{s.side}:{i}" for i, s in enumerate(samples)]
    return ImageSet(images, np.array([s.kl_grade for s in samples]), ids)


def cmd_train(args):
    """Train on pre-split manifests (train.csv / val.csv from ``split``)."""
    cfg = RunConfig.from_mapping({k: v for k, v in {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size, "init_seed": args.init_seed,
        "augment_seed": args.augment_seed, "r0": args.r0, "w0": args.w0, "d0": args.d0, "phi": args.phi,
    }.items() if v is not None})
    if args.no_affine:
        cfg.policy = AffinePolicy.identity()
    data = TrainingData(_labelled_images(args.train), _labelled_images(args.val))
    net = build_network(cfg.scaling, seed=cfg.init_seed)
    state, train_log = train(net, data, cfg.policy, cfg.epochs, cfg.augment_seed, lr=cfg.lr,
                             batch_size=cfg.batch_size)
    state.scaling = cfg.scaling
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint.npz"), state)
    train_log.write(os.path.join(args.out, "training_log.csv"))
    cfg.save(os.path.join(args.out, "config.txt"))
    print(f"best epoch {state.best_epoch} (val loss {state.best_val_loss:.4f}) -> {args.out}")


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    data = _labelled_images(args.manifest)
    probs = predict_proba(state.net, to_tensor(data.images, state.net.input_shape[1]))
    scores = prf1(confusion(data.labels, probs.argmax(axis=1)))
    text = METRICS_HEADER + "\n" + metrics_row(args.name, scores) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "per_class.csv"), "w") as fh:
            fh.write(per_class_csv(scores))


def cmd_gradcam(args):
    state = load_checkpoint(args.checkpoint)
    if args.image:
        img = load_image(args.image)
        res = compute_gradcam(state.net, img, args.target)
        save_overlay(render_overlay(res, img), args.out)
        print(f"class KL{args.target} confidence {res.confidence:.4f} -> {args.out}")
        return
    data = _labelled_images(args.manifest)
    probs = predict_proba(state.net, to_tensor(data.images, state.net.input_shape[1]))
    written = write_gradcams(state.net, data, probs, args.name, args.out, args.top_n)
    print(f"{len(written)} overlays -> {args.out}")


def cmd_run(args):
    cfg = _config_from_args(args)
    res = run_experiment(cfg)
    print(f"{res.condition}: accuracy {res.accuracy:.4f} precision {res.precision:.4f} "
          f"recall {res.recall:.4f} f1 {res.f1:.4f} -> {res.out_dir}")


def cmd_sweep(args):
    cfg = _config_from_args(args)
    conditions = args.conditions.split(",") if args.conditions else list(CONDITION_NAMES)
    results, failures, path = run_sweep(conditions, cfg, jobs=args.jobs)
    with open(path) as fh:
        print(fh.read(), end="")
    if failures:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args):
    dirs = [os.path.join(args.sweep_dir, d) for d in sorted(os.listdir(args.sweep_dir))
            if os.path.isfile(os.path.join(args.sweep_dir, d, "metrics.csv"))]
    if not dirs:
        raise ConfigError(f"no run directories with metrics.csv under {args.sweep_dir}")
    text = summary_csv(collect_reports(dirs), {})
    out = args.out or os.path.join(args.sweep_dir, "summary.csv")
    with open(out, "w") as fh:
        fh.write(text)
    print(text, end="")


def build_parser():
    ap = argparse.ArgumentParser(prog="kneeaug", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic knee phantom dataset")
    p.add_argument("--n-per-class", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("preprocess", help="mirror right knees, invert negatives, equalise")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("augment", help="apply one base augmentation condition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--condition", required=True, choices=CONDITION_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--roi-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("split", help="patient-aware train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("validate", help="check a manifest and report its grade distribution")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reference", action="store_true", help="require the reference cohort's grade counts")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("train", help="train on split manifests")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--r0", type=int)
    p.add_argument("--w0", type=int)
    p.add_argument("--d0", type=int)
    p.add_argument("--no-affine", action="store_true")
    _add_seed(p, "init_seed", "augment_seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--name", default="eval")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcam", help="Grad-CAM overlays from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--image")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--name", default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gradcam)

    p = sub.add_parser("run", help="full experiment for one condition")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run many conditions with shared seeds")
    _add_run_flags(p)
    p.add_argument("--conditions", help="comma-separated names (default: all 18)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="rebuild summary.csv from run directories")
    p.add_argument("--sweep-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("backend %s", accel.backend_name())
    if args.verb == "gradcam" and not (args.image or args.manifest):
        print("error: gradcam needs --image or --manifest", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        rc = args.fn(args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if exc.step == "config" else EXIT_RUNTIME
    except (ImageError, NNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
