"""Training loop with online affine augmentation and best-validation checkpointing."""
from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..imagecore import GrayImage, resize_bilinear
from ..online import AffinePolicy, apply_affine, draw_affine
from .layers import NNError
from .network import LayerStack, ScalingConfig, backward, build_network, evaluate_loss, forward
from .optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class EmptySplit(NNError):
    pass


@dataclass
class ImageSet:
    images: list
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)


@dataclass
class TrainingData:
    train: ImageSet
    val: ImageSet


@dataclass
class TrainState:
    net: LayerStack
    optimizer: Adam
    batch_size: int = 16
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    best_params: dict = field(default_factory=dict)
    scaling: ScalingConfig | None = None

    @property
    def step(self):
        return self.optimizer.t

    def consider_checkpoint(self, val_loss, epoch):
        """Keep the current parameters if ``val_loss`` strictly improves."""
        if val_loss < self.best_val_loss:
            self.best_val_loss = float(val_loss)
            self.best_epoch = epoch
            self.best_params = self.net.get_state()
            return True
        return False


def adam_step(state: TrainState, grads) -> TrainState:
    state.optimizer.step(state.net.params, grads)
    state.net.version += 1
    return state


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, val_accuracy):
        self.rows.append((epoch, train_loss, val_loss, val_accuracy))

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy"]
        lines += [f"{e},{tl:.8f},{vl:.8f},{va:.6f}" for e, tl, vl, va in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def to_tensor(images, resolution) -> np.ndarray:
    """Resize to the network resolution and scale intensities to [0, 1]."""
    arr = np.empty((len(images), 1, resolution, resolution), dtype=np.float64)
    for i, img in enumerate(images):
        arr[i, 0] = resize_bilinear(img, resolution, resolution).pixels / 255.0
    return arr


def augmented_batch(images, ids, policy, seed, epoch, resolution):
    out = []
    for img, sid in zip(images, ids):
        draw = draw_affine(policy, seed, sid, epoch)
        out.append(apply_affine(img, draw))
    return to_tensor(out, resolution)


def train(net: LayerStack, data: TrainingData, policy: AffinePolicy, epochs: int, seed: int,
          lr=1e-3, batch_size=16, patience=None, state: TrainState | None = None):
    """Train with Adam; returns the state holding the minimum-validation-loss parameters.

    Online affine augmentation touches training batches only. Sample ``i`` of the
    training set is augmented with the draw keyed by ``(seed, i, epoch)``.
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise EmptySplit("training and validation sets must be non-empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    res = net.input_shape[1]
    state = state or TrainState(net, Adam(lr=lr), batch_size=batch_size)
    val_x = to_tensor(data.val.images, res)
    train_log = TrainingLog()
    n = len(data.train)
    plain_train = None
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([int(seed), epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, state.batch_size):
            idx = order[start:start + state.batch_size]
            imgs = [data.train.images[i] for i in idx]
            if policy == AffinePolicy.identity():
                if plain_train is None:
                    plain_train = to_tensor(data.train.images, res)
                x = plain_train[idx]
            else:
                x = augmented_batch(imgs, [int(i) for i in idx], policy, seed, epoch, res)
            _, tape = forward(net, x, keep_activations=True)
            grads = backward(net, tape, data.train.labels[idx])
            total += grads.loss * len(idx)
            adam_step(state, grads)
        val_loss, probs = evaluate_loss(net, val_x, data.val.labels)
        val_acc = float(np.mean(probs.argmax(axis=1) == data.val.labels))
        state.epoch = epoch
        improved = state.consider_checkpoint(val_loss, epoch)
        train_log.append(epoch, total / n, val_loss, val_acc)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f%s", epoch, total / n, val_loss,
                 val_acc, " *" if improved else "")
        if patience is not None and epoch - state.best_epoch >= patience:
            break
    net.set_state(state.best_params)
    return state, train_log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState):
    net = state.net
    scaling = state.scaling
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": net.description,
        "scaling": scaling.__dict__ if scaling is not None else None,
        "input_shape": list(net.input_shape),
        "adam": state.optimizer.hyperparameters(),
        "step": state.optimizer.t,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "batch_size": state.batch_size,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in net.params.items():
        arrays[f"param/{k}"] = v
        if k in state.optimizer.m:
            arrays[f"adam_m/{k}"] = state.optimizer.m[k]
            arrays[f"adam_v/{k}"] = state.optimizer.v[k]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')}")
        arch = header["architecture"]
        scaling = ScalingConfig(**header["scaling"]) if header["scaling"] else ScalingConfig()
        net = build_network(scaling, n_classes=arch["n_classes"], seed=arch["seed"],
                            expansion=arch["expansion"], se_reduction=arch["se_reduction"],
                            dense_units=arch["dense_units"], in_channels=arch["in_channels"])
        net.set_state({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        opt = Adam(**header["adam"])
        opt.t = header["step"]
        for k in net.params:
            if f"adam_m/{k}" in z.files:
                opt.m[k] = z[f"adam_m/{k}"].copy()
                opt.v[k] = z[f"adam_v/{k}"].copy()
    state = TrainState(net, opt, batch_size=header["batch_size"], epoch=header["epoch"],
                       best_val_loss=header["best_val_loss"], best_epoch=header["best_epoch"],
                       best_params=net.get_state(), scaling=scaling)
    return state


def images_to_tensor(images: list[GrayImage], net: LayerStack) -> np.ndarray:
    return to_tensor(images, net.input_shape[1])
