"""Run orchestration: preprocess, base augmentation, split, train, evaluate, explain."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__, accel
from .dataset import SplitDataset, load_manifest, preprocess_all, split_patients
from .gradcam import compute_gradcam, render_overlay, save_overlay
from .metrics import (METRICS_HEADER, DegenerateClass, confusion, metrics_row, per_class_csv, prf1,
                      roc_one_vs_all)
from .nn.network import ScalingConfig, build_network, predict_proba
from .nn.train import ImageSet, TrainingData, save_checkpoint, to_tensor, train
from .offline import CONDITIONS, AugmentationCondition, UnknownCondition, apply_condition
from .online import AffinePolicy

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"[{step}] {type(cause).__name__}: {cause}")
        self.step = step


def _to_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "runs"
    condition: str = "baseline"
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 16
    init_seed: int = 0
    split_seed: int = 0
    augment_seed: int = 0
    fractions: tuple = (0.70, 0.15, 0.15)
    augment_eval_splits: bool = True
    patience: int = 0
    gradcam_top_n: int = 3
    roi_fraction: float = 0.5
    policy: AffinePolicy = field(default_factory=AffinePolicy)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)

    def validate(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ConfigError(f"fractions must be three positive values summing to 1, got {self.fractions}")
        return self

    # flat key=value serialisation ------------------------------------------------

    def to_items(self):
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "policy":
                items += [(k, v2) for k, v2 in v.to_dict().items()]
            elif f.name == "scaling":
                items += [(k, v2) for k, v2 in asdict(v).items()]
            elif f.name == "fractions":
                items.append((f.name, ",".join(repr(float(x)) for x in v)))
            else:
                items.append((f.name, v))
        return items

    def to_text(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_items())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_mapping(cls, d):
        d = dict(d)
        policy_keys = {f.name for f in fields(AffinePolicy)}
        scaling_keys = {f.name for f in fields(ScalingConfig)}
        own = {f.name: f for f in fields(cls)}
        policy = {k: d.pop(k) for k in list(d) if k in policy_keys}
        scaling = {k: d.pop(k) for k in list(d) if k in scaling_keys}
        kw = {}
        for k, v in d.items():
            if k not in own or k in ("policy", "scaling"):
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, own[k].default)
        try:
            kw["policy"] = AffinePolicy.from_dict(policy)
            sc = {}
            for k, v in scaling.items():
                sc[k] = int(v) if k in ("d0", "w0", "r0") else float(v)
            kw["scaling"] = ScalingConfig(**sc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(**kw)

    @classmethod
    def load(cls, path):
        return cls.from_mapping(parse_flat_config(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, value, default):
    try:
        if key == "fractions":
            if isinstance(value, str):
                return tuple(float(x) for x in value.split(","))
            return tuple(float(x) for x in value)
        if isinstance(default, bool):
            return _to_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_flat_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Preprocessed images keyed by split, shared across the conditions of a sweep."""

    split: SplitDataset
    images: dict
    n_inverted: int = 0


def prepare(config: RunConfig) -> PreparedData:
    samples = load_manifest(config.manifest)
    pre_samples, images, report = preprocess_all(samples)
    index = {id(s): i for i, s in enumerate(pre_samples)}
    split = split_patients(pre_samples, config.fractions, config.split_seed)
    by_split = {name: [images[index[id(s)]] for s in part] for name, part in split.parts().items()}
    return PreparedData(split, by_split, report.n_inverted)


def image_seed(augment_seed, split_idx, sample_idx) -> int:
    return int(np.random.SeedSequence([int(augment_seed), split_idx, sample_idx]).generate_state(1, np.uint64)[0])


def augment_split(images, samples, cond_name, augment_seed, split_idx, roi_fraction=0.5):
    """Apply a base condition to every image of one split; labels follow the source."""
    out_images, labels, sources = [], [], []
    for i, (img, s) in enumerate(zip(images, samples)):
        cond = AugmentationCondition(cond_name, image_seed(augment_seed, split_idx, i),
                                     {"roi_fraction": roi_fraction})
        for j, aug in enumerate(apply_condition(img, cond)):
            out_images.append(aug)
            labels.append(s.kl_grade)
            sources.append(f"{s.patient_id}:{s.side}:{j}")
    return ImageSet(out_images, np.array(labels, dtype=np.int64), sources)


def build_sets(config: RunConfig, prepared: PreparedData) -> dict:
    sets = {}
    for k, name in enumerate(SPLIT_NAMES):
        cond = config.condition if (name == "train" or config.augment_eval_splits) else "baseline"
        sets[name] = augment_split(prepared.images[name], prepared.split.parts()[name], cond,
                                   config.augment_seed, k, config.roi_fraction)
    return sets


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    condition: str
    out_dir: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    n_train: int
    n_test: int
    best_epoch: int
    aucs: dict


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _step(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


def write_gradcams(net, test: ImageSet, probs, condition, out_dir, top_n):
    """Top-N test images per true class ranked by that class's confidence."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for cls in range(probs.shape[1]):
        idx = np.nonzero(test.labels == cls)[0]
        if idx.size == 0 or top_n <= 0:
            continue
        ranked = idx[np.argsort(-probs[idx, cls], kind="mergesort")][:top_n]
        for rank, i in enumerate(ranked, start=1):
            img = test.images[i]
            res = compute_gradcam(net, img, cls)
            stem = f"KL{cls}_rank{rank:02d}"
            save_overlay(render_overlay(res, img), os.path.join(out_dir, stem + ".png"))
            _write(os.path.join(out_dir, stem + ".txt"),
                   f"class=KL{cls}\nconfidence={res.confidence:.6f}\ncondition={condition}\n"
                   f"predicted=KL{int(probs[i].argmax())}\nsource={test.ids[i]}\n")
            written.append(stem)
    return written


def run_experiment(config: RunConfig, prepared: PreparedData | None = None) -> RunResult:
    """One condition end to end; writes the report directory ``config.out_dir``."""
    _step("config", config.validate)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    if prepared is None:
        prepared = _step("preprocess", prepare, config)
    sets = _step("augment", build_sets, config, prepared)
    net = _step("build", build_network, config.scaling, seed=config.init_seed)
    data = TrainingData(sets["train"], sets["val"])
    state, train_log = _step("train", train, net, data, config.policy, config.epochs, config.augment_seed,
                             lr=config.lr, batch_size=config.batch_size,
                             patience=config.patience or None)
    state.scaling = config.scaling
    test = sets["test"]
    probs = _step("evaluate", predict_proba, net, to_tensor(test.images, net.input_shape[1]))
    preds = probs.argmax(axis=1)
    cm = confusion(test.labels, preds)
    scores = prf1(cm)

    _write(os.path.join(out, "metrics.csv"), METRICS_HEADER + "\n" + metrics_row(config.condition, scores) + "\n")
    _write(os.path.join(out, "per_class.csv"), per_class_csv(scores))
    _write(os.path.join(out, "confusion.csv"), cm.to_csv())
    _write(os.path.join(out, "confusion_normalized.csv"), cm.to_csv(normalized=True))
    aucs = {}
    auc_lines = ["class,auc"]
    for k in range(probs.shape[1]):
        try:
            roc = roc_one_vs_all(probs, test.labels, k)
        except DegenerateClass:
            auc_lines.append(f"KL{k},")
            continue
        aucs[k] = roc.auc
        auc_lines.append(f"KL{k},{roc.auc:.6f}")
        _write(os.path.join(out, f"roc_KL{k}.csv"), roc.to_csv())
    _write(os.path.join(out, "auc.csv"), "\n".join(auc_lines) + "\n")
    _write(os.path.join(out, "training_log.csv"), train_log.to_csv())
    _write(os.path.join(out, "predictions.csv"),
           "source,true,pred," + ",".join(f"p{k}" for k in range(probs.shape[1])) + "\n"
           + "".join(f"{sid},{t},{p}," + ",".join(f"{v:.6f}" for v in row) + "\n"
                     for sid, t, p, row in zip(test.ids, test.labels, preds, probs)))
    _step("checkpoint", save_checkpoint, os.path.join(out, "checkpoint.npz"), state)
    _step("gradcam", write_gradcams, net, test, probs, config.condition, os.path.join(out, "gradcam"),
          config.gradcam_top_n)
    config.save(os.path.join(out, "config.txt"))
    _write(os.path.join(out, "provenance.txt"),
           f"kneeaug_version={__version__}\nbackend={accel.backend_name()}\n"
           f"condition_kind={CONDITIONS[config.condition].kind}\n"
           f"n_train={len(sets['train'])}\nn_val={len(sets['val'])}\nn_test={len(test)}\n"
           f"best_epoch={state.best_epoch}\nn_inverted={prepared.n_inverted}\n"
           f"averaging={scores.averaging}\n" + config.to_text())
    log.info("%s: accuracy %.3f (train %d, test %d) in %.1fs", config.condition, scores.accuracy,
             len(sets["train"]), len(test), time.perf_counter() - t0)
    return RunResult(config.condition, out, scores.accuracy, scores.precision, scores.recall, scores.f1,
                     len(sets["train"]), len(test), state.best_epoch, aucs)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SUMMARY_HEADER = "condition,kind,accuracy,precision,recall,f1,status"


def _run_one(args):
    cfg, prepared = args
    try:
        return run_experiment(cfg, prepared), None
    except Exception as exc:  # one failed condition must not abort the sweep
        return None, f"{type(exc).__name__}: {exc}"


def summary_csv(results, failures) -> str:
    rows = sorted(results, key=lambda r: (-round(r.accuracy, 12), r.condition))
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append(f"{r.condition},{CONDITIONS[r.condition].kind},{r.accuracy:.6f},{r.precision:.6f},"
                     f"{r.recall:.6f},{r.f1:.6f},ok")
    for name in sorted(failures):
        kind = CONDITIONS[name].kind if name in CONDITIONS else ""
        lines.append(f"{name},{kind},,,,,failed")
    return "\n".join(lines) + "\n"


def run_sweep(conditions, config: RunConfig, jobs=1, prepared: PreparedData | None = None):
    """Run every condition with shared seeds; writes ``summary.csv`` in ``config.out_dir``.

    Returns ``(results, failures, summary_path)``.
    """
    for name in conditions:
        if name not in CONDITIONS:
            raise UnknownCondition(f"unknown condition {name!r}")
    os.makedirs(config.out_dir, exist_ok=True)
    if prepared is None:
        prepared = _step("preprocess", prepare, config)
    tasks = [(replace(config, condition=name, out_dir=os.path.join(config.out_dir, name)), prepared)
             for name in conditions]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks))
    else:
        outcomes = [_run_one(t) for t in tasks]
    results, failures = [], {}
    for name, (res, err) in zip(conditions, outcomes):
        if res is None:
            log.error("condition %s failed: %s", name, err)
            failures[name] = err
        else:
            results.append(res)
    path = os.path.join(config.out_dir, "summary.csv")
    _write(path, summary_csv(results, failures))
    if failures:
        _write(os.path.join(config.out_dir, "failures.txt"),
               "".join(f"{k}: {v}\n" for k, v in sorted(failures.items())))
    return results, failures, path


def collect_reports(run_dirs):
    """Rebuild sweep results from existing run directories (``metrics.csv`` each)."""
    results = []
    for d in run_dirs:
        path = os.path.join(d, "metrics.csv")
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        name, acc, prec, rec, f1 = lines[1].split(",")
        results.append(RunResult(name, d, float(acc), float(prec), float(rec), float(f1), 0, 0, 0, {}))
    return results
