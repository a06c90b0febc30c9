"""Training and evaluation loops for :class:`~fovtrack.vit.GazeViT`.

Adam with a step learning-rate schedule, early stopping on a validation
metric (mean error for MSE runs, P95 for the tail-oriented losses) and a
fine-tuning entry point for pruned models.  Angular errors are measured
between 3-D gaze rays rebuilt from (pitch, yaw).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cropper import CropperConfig, crop_around, locate_and_crop
from .geometry import LatencyProfile, bundled_profile, load_profile
from .images import resize
from .losses import LOSS_KINDS, LossConfig, objective
from .synth import AugmentConfig, LabeledFrame, augment_image, flip_right_eye, normalize
from .vit import GazeViT, TruncatedModel

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "ErrorDistribution",
    "EpochLog",
    "Dataset",
    "TrainingDiverged",
    "angular_error",
    "nearest_rank",
    "evaluate",
    "preprocess",
    "make_dataset",
    "split",
    "learning_rate",
    "train",
    "finetune_pruned",
    "write_log",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, value: float, detail: str = ""):
        msg = f"non-finite training loss {value} at epoch {epoch}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_size: int = 10
    gamma: float = 0.2
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    finetune_lr: float = 5e-5
    finetune_epochs: int = 50
    loss: str = "mse"
    N: float = 100.0
    theta_i: float = 5.0
    profile: str = "1080P"  # bundled resolution label or a CSV path
    augment: bool = True
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps", "step_size", "gamma", "batch_size",
                     "max_epochs", "patience", "finetune_lr", "finetune_epochs", "N"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def latency_profile(self) -> LatencyProfile:
        if Path(self.profile).suffix == ".csv":
            return load_profile(self.profile)
        return bundled_profile(self.profile)

    def loss_config(self) -> LossConfig:
        profile = self.latency_profile() if self.loss in ("performance_aware", "multires") else None
        return LossConfig(kind=self.loss, N=self.N, profile=profile, theta_i=self.theta_i)

    @property
    def tail_metric(self) -> bool:
        return self.loss != "mse"

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


# --- error statistics ------------------------------------------------------


def gaze_rays(gaze) -> np.ndarray:
    g = np.asarray(gaze, dtype=np.float64)
    pitch, yaw = g[..., 0], g[..., 1]
    return np.stack([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1)


def angular_error(pred, truth) -> np.ndarray | float:
    """Angle in degrees between gaze rays given as (pitch, yaw) radians."""
    a, b = gaze_rays(pred), gaze_rays(truth)
    cos = np.clip((a * b).sum(-1), -1.0, 1.0)
    out = np.degrees(np.arccos(cos))
    return out if out.ndim else float(out)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = sorted_values.size
    rank = max(1, math.ceil(pct / 100.0 * n - 1e-9))
    return float(sorted_values[rank - 1])


@dataclass(frozen=True)
class ErrorDistribution:
    mean: float
    p90: float
    p95: float
    min: float
    max: float
    count: int

    @classmethod
    def from_errors(cls, errors) -> "ErrorDistribution":
        e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
        if e.size == 0:
            raise ValueError("no errors to summarise")
        return cls(
            mean=float(e.mean()),
            p90=nearest_rank(e, 90),
            p95=nearest_rank(e, 95),
            min=float(e[0]),
            max=float(e[-1]),
            count=int(e.size),
        )

    def percentile(self, name: str) -> float:
        name = name.lower()
        if name not in ("p90", "p95"):
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        return asdict(self)


# --- data preparation ------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (n, side, side) raw intensities as float64
    gaze: np.ndarray  # (n, 2) pitch, yaw radians

    def __len__(self):
        return self.gaze.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.gaze[idx])


def preprocess(frame: np.ndarray, side: int, crop: bool = True, cropper: CropperConfig = CropperConfig()) -> np.ndarray:
    """Pupil-centred crop (or the whole frame) resized to ``side x side``."""
    if crop:
        h, w = frame.shape
        window = locate_and_crop(frame, cropper)
        if window is None:
            # No pupil found: fall back to the frame centre.
            window = crop_around((w / 2, h / 2), cropper.window, (w, h))
        frame = window.extract(frame)
    return resize(frame, (side, side))


def make_dataset(items: Sequence[LabeledFrame], side: int, crop: bool = True,
                 cropper: CropperConfig = CropperConfig()) -> Dataset:
    items = [flip_right_eye(it) for it in items]
    if not items:
        raise ValueError("empty corpus")
    imgs = np.stack([preprocess(it.frame, side, crop, cropper) for it in items])
    gaze = np.array([[it.gaze.pitch, it.gaze.yaw] for it in items], dtype=np.float64)
    return Dataset(imgs, gaze)


def split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng([seed, 1]).permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def norm_stats(images: np.ndarray) -> tuple[float, float]:
    x = images / 255.0
    return float(x.mean()), float(x.std() or 1.0)


def evaluate(model, data: Dataset, depth: int | None = None, norm: AugmentConfig | None = None,
             batch_size: int = 256) -> ErrorDistribution:
    """Angular-error summary of ``model`` (a GazeViT or truncated view) on ``data``."""
    if len(data) == 0:
        raise ValueError("empty corpus")
    errs = angular_error(predict(model, data, depth, norm, batch_size), data.gaze)
    return ErrorDistribution.from_errors(errs)


def predict(model, data: Dataset, depth: int | None = None, norm: AugmentConfig | None = None,
            batch_size: int = 256) -> np.ndarray:
    norm = norm or AugmentConfig()
    if isinstance(model, TruncatedModel):
        depth, model = model.depth, model.model
    depth = model.config.depth if depth is None else depth
    out = []
    for s in range(0, len(data), batch_size):
        x = normalize(data.images[s : s + batch_size], norm)
        out.append(model.predict(x, depth))
    return np.concatenate(out)


# --- optimisation ----------------------------------------------------------


def learning_rate(cfg: TrainConfig, epoch: int, base: float | None = None) -> float:
    """Step schedule: ``base * gamma ** (epoch // step_size)`` (epochs count from 0)."""
    base = cfg.lr if base is None else base
    return base * cfg.gamma ** (epoch // cfg.step_size)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float, beta2: float, eps: float):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_mean_deg: float
    val_p95_deg: float
    lr: float


def write_log(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_mean_deg", "val_p95_deg", "lr"))
        for r in logs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mean_deg), repr(r.val_p95_deg), repr(r.lr)])


@dataclass
class TrainResult:
    model: GazeViT
    log: list[EpochLog]
    best_epoch: int
    norm: AugmentConfig
    stopped_early: bool = False


def train(model: GazeViT, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          loss: LossConfig | None = None, norm: AugmentConfig | None = None,
          base_lr: float | None = None, max_epochs: int | None = None) -> TrainResult:
    """Fit ``model`` in place and return the best-validation copy plus the epoch log."""
    if val is None:
        data, val = split(data, cfg.val_fraction, cfg.seed)
    loss = loss or cfg.loss_config()
    if norm is None:
        mean, std = norm_stats(data.images)
        norm = AugmentConfig(mean=mean, std=std)
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    eval_depth = model.config.depth

    best, best_metric, best_epoch, stale = model.copy(), math.inf, -1, 0
    logs: list[EpochLog] = []
    stopped = False
    for epoch in range(max_epochs):
        lr = learning_rate(cfg, epoch, base_lr)
        order = rng.permutation(len(data))
        total, batches = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if cfg.augment:
                x = np.stack([augment_image(img, norm, rng) for img in data.images[idx]])
            else:
                x = normalize(data.images[idx], norm)
            try:
                preds, cache = model.forward(x, return_cache=True)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, math.nan, str(exc)) from exc
            if not all(np.isfinite(p).all() and np.abs(p).max() < 1e150 for p in preds.values()):
                raise TrainingDiverged(epoch, math.inf, "predictions overflow")
            value, dpreds = objective(preds, data.gaze[idx], loss)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            grads = model.backward(cache, dpreds)
            opt.step(model.params, grads, lr)
            total += value
            batches += 1
        dist = evaluate(model, val, eval_depth, norm)
        logs.append(EpochLog(epoch, total / batches, dist.mean, dist.p95, lr))
        metric = dist.p95 if cfg.tail_metric else dist.mean
        log.debug("epoch %d loss %.6g val mean %.3f p95 %.3f", epoch, total / batches, dist.mean, dist.p95)
        if metric < best_metric:
            best, best_metric, best_epoch, stale = model.copy(), metric, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = True
                break
    return TrainResult(best, logs, best_epoch, norm, stopped)


def finetune_pruned(model: GazeViT, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
                    loss: LossConfig | None = None, norm: AugmentConfig | None = None) -> TrainResult:
    """Fine-tune a token-pruned model with the fine-tuning learning rate and epoch cap."""
    if model.config.prune_ratio <= 0:
        raise ValueError("finetune_pruned needs a model with prune_ratio > 0")
    epochs = min(cfg.finetune_epochs, cfg.max_epochs)
    ft = replace(cfg, lr=cfg.finetune_lr, max_epochs=epochs, patience=min(cfg.patience, epochs))
    return train(model, data, ft, val=val, loss=loss, norm=norm)
