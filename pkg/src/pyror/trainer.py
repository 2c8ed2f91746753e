"""Desk-scale training: datasets, augmentation, SGD with step LR, evaluation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .archspec import ConfigError, parse_key_values
from .graph import LayerGraph
from .nnkernel import ParamStore, backward, forward, init_params, softmax_cross_entropy
from .nnkernel.checkpoint import save_checkpoint
from .stochdepth import SurvivalSchedule, sample_mask

log = logging.getLogger(__name__)

CIFAR_SCHEDULE = ((0, 0.1), (250, 0.01), (375, 0.001))
SVHN_SCHEDULE = ((0, 0.1), (30, 0.01), (35, 0.001))
RECORD_BYTES = 1 + 3 * 32 * 32
NORMALIZE_MODES = ("per_channel_meanstd", "none")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        super().__init__(f"loss became {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr_schedule: tuple = CIFAR_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    normalize: str = "per_channel_meanstd"
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched or sched[0][0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("lr_schedule start epochs must be strictly increasing")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.normalize not in NORMALIZE_MODES:
            raise ConfigError(f"normalize must be one of {NORMALIZE_MODES}, got {self.normalize!r}")

    @classmethod
    def smoke(cls, **overrides) -> "TrainConfig":
        """30 epochs at constant lr 0.1; the CI profile."""
        base = dict(epochs=30, batch_size=128, lr_schedule=((0, 0.1),))
        base.update(overrides)
        return cls(**base)


def format_schedule(schedule) -> str:
    return ",".join(f"{e}:{lr:g}" for e, lr in schedule)


def parse_schedule(text: str) -> tuple:
    named = {"cifar": CIFAR_SCHEDULE, "svhn": SVHN_SCHEDULE}
    if text.strip().lower() in named:
        return named[text.strip().lower()]
    out = []
    for part in text.split(","):
        try:
            epoch, lr = part.split(":")
            out.append((int(epoch), float(lr)))
        except ValueError:
            raise ConfigError(f"bad lr schedule entry {part!r}; expected epoch:lr") from None
    return tuple(out)


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_TRAIN_FIELDS = {
    "epochs": int, "batch_size": int, "lr_schedule": parse_schedule, "momentum": float,
    "weight_decay": float, "augment": _parse_bool, "normalize": str, "seed": int,
    "eval_every": int, "checkpoint_every": int,
}


def coerce_train_values(values: dict) -> dict:
    out = {}
    for key, value in values.items():
        try:
            out[key] = _TRAIN_FIELDS[key](value) if isinstance(value, str) else value
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    values = parse_key_values(Path(path).read_text(encoding="utf-8"), _TRAIN_FIELDS)
    return replace(base or TrainConfig(), **coerce_train_values(values))


# -- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray            # (count, 3, 32, 32) float32
    labels: np.ndarray            # (count,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError(f"label {self.labels.max()} out of range for {self.num_classes} classes")

    def __len__(self):
        return len(self.labels)


def decode_cifar_records(data: bytes, split="train", num_classes=10) -> Dataset:
    n, rest = divmod(len(data), RECORD_BYTES)
    if rest:
        raise ValueError(f"truncated record at byte offset {n * RECORD_BYTES}: "
                         f"{rest} of {RECORD_BYTES} bytes present")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {labels[i]} >= {num_classes} in record {i} "
                         f"(byte offset {i * RECORD_BYTES})")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split, num_classes)


def load_cifar_binary(path, split="train", num_classes=10) -> Dataset:
    """CIFAR-10 binary batches: one file, or a directory holding the standard batches."""
    path = Path(path)
    if path.is_dir():
        names = ["test_batch.bin"] if split == "test" else [f"data_batch_{i}.bin" for i in range(1, 6)]
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR {split} batches in {path}")
    else:
        files = [path]
    parts = [decode_cifar_records(f.read_bytes(), split, num_classes) for f in files]
    if len(parts) == 1:
        return parts[0]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), split, num_classes)


def make_synthetic(classes: int, per_class: int, seed: int = 0, size: int = 32,
                   noise: float = 0.08, split="train") -> Dataset:
    """Coloured Gaussian-blob images, one colour/blob position per class.

    The class colours sit on a circle around mid-grey, so channel means after
    global pooling separate the classes linearly.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    phase = 2 * np.pi * np.arange(classes) / classes
    colours = 0.5 + 0.25 * np.stack([np.cos(phase + s) for s in (0, 2 * np.pi / 3, 4 * np.pi / 3)], 1)
    centres = rng.uniform(0.3 * size, 0.7 * size, (classes, 2))
    yy, xx = np.mgrid[0:size, 0:size]

    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        cy, cx = centres[c] + rng.normal(0, 1.5, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 6) ** 2))
        img = colours[c][:, None, None] * (0.6 + 0.4 * blob)
        img = img + rng.normal(0, noise, (3, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split, classes)


def apply_augmentation(images, flips, offsets, pad=4):
    """Flip where ``flips`` is set, then crop at ``offsets`` from a zero-padded copy."""
    B, C, H, W = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(B):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + H, dx:dx + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment_batch(images, rng, pad=4):
    """Random horizontal flip (p = 0.5) and random crop after zero-padding by ``pad``."""
    B = len(images)
    flips = rng.random(B) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(B, 2))
    return apply_augmentation(images, flips, offsets, pad)


def channel_stats(dataset: Dataset):
    x = dataset.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(dataset: Dataset, stats) -> Dataset:
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    if np.any(std == 0):
        raise ValueError(f"zero standard deviation in channel(s) {np.flatnonzero(std == 0).tolist()}")
    x = (dataset.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(x.astype(np.float32), dataset.labels.copy(), dataset.split, dataset.num_classes)


def lr_at(schedule, epoch: int, epochs: int | None = None) -> float:
    if epoch < 0 or (epochs is not None and epoch >= epochs):
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    lr = None
    for start, value in schedule:
        if epoch >= start:
            lr = value
    if lr is None:
        raise ValueError(f"schedule does not cover epoch {epoch}")
    return lr


# -- optimisation --------------------------------------------------------------

class SGD:
    """Momentum SGD with L2 weight decay: v <- mu v - lr (g + wd theta); theta <- theta + v."""

    def __init__(self, params: ParamStore, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {(nid, name): np.zeros_like(p) for nid, name, p, _ in params.learned()}

    def step(self, lr):
        lr = self.params.dtype.type(lr)
        mu = self.params.dtype.type(self.momentum)
        wd = self.params.dtype.type(self.weight_decay)
        for nid, name, p, g in self.params.learned():
            v = self.velocity[(nid, name)]
            v *= mu
            v -= lr * (g + wd * p) if wd else lr * g
            p += v
        self.params.bump()


@dataclass
class TrainResult:
    params: ParamStore
    log: list = field(default_factory=list)
    stats: tuple | None = None
    steps: int = 0


def train(graph: LayerGraph, cfg: TrainConfig, dataset: Dataset,
          sd_schedule: SurvivalSchedule | None = None, test_set: Dataset | None = None,
          params: ParamStore | None = None, log_path=None, checkpoint_dir=None,
          max_steps: int | None = None) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng = np.random.default_rng(seeds[0])
    sd_rng = np.random.default_rng(seeds[1])
    if params is None:
        params = init_params(graph, cfg.seed)

    stats = None
    if cfg.normalize == "per_channel_meanstd":
        stats = channel_stats(dataset)
        dataset = normalize(dataset, stats)
        if test_set is not None:
            test_set = normalize(test_set, stats)

    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    result = TrainResult(params, stats=stats)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    ckpt_config = {"graph": graph.config.to_dict(), "normalize": _stats_json(stats)}
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg.lr_schedule, epoch, cfg.epochs)
            order = data_rng.permutation(len(dataset))
            loss_sum = correct = seen = 0.0
            active = []
            for start in range(0, len(order), cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                x = dataset.images[idx]
                y = dataset.labels[idx]
                if cfg.augment:
                    x = augment_batch(x, data_rng)
                mask = None
                if sd_schedule is not None:
                    mask = sample_mask(sd_schedule, sd_rng)
                    active.append(mask.mean())
                logits, cache = forward(graph, params, x, "train", sd_mask=mask)
                loss, dlogits = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise TrainingDiverged(step, loss)
                backward(graph, params, cache, dlogits)
                opt.step(lr)
                step += 1
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == y).sum())
                seen += len(idx)
            if seen == 0:
                break
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / seen,
                "train_acc": correct / seen,
                "test_acc": None,
                "lr": lr,
                "active_fraction": float(np.mean(active)) if active else 1.0,
                "steps": step,
            }
            if test_set is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                metrics = evaluate(graph, params, test_set, sd_schedule)
                record["test_acc"] = 1.0 - metrics["top1_error"]
            result.log.append(record)
            log.info("epoch %d loss %.4f acc %.4f", epoch, record["train_loss"], record["train_acc"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", params, ckpt_config)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir:
        save_checkpoint(Path(checkpoint_dir) / "last.ckpt", params, ckpt_config)
    result.steps = step
    return result


def _stats_json(stats):
    if stats is None:
        return None
    return {"mean": [float(v) for v in stats[0]], "std": [float(v) for v in stats[1]]}


def evaluate(graph: LayerGraph, params: ParamStore, dataset: Dataset,
             sd_schedule: SurvivalSchedule | None = None, batch_size=256) -> dict:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    wrong = 0
    loss_sum = 0.0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits, _ = forward(graph, params, x, "eval", sd_probs=sd_schedule)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        wrong += int((logits.argmax(axis=1) != y).sum())
    return {"top1_error": wrong / len(dataset), "mean_loss": loss_sum / len(dataset)}


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_schedule"] = [list(e) for e in cfg.lr_schedule]
    return d


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
