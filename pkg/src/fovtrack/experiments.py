"""Paired toy experiments: loss comparison on an outlier corpus and the cropping ablation.

Each experiment trains small models on synthetic corpora with fixed seeds so
that runs are directly comparable.  They are sized to finish in a few
minutes on one CPU core.

Loss comparison protocol: one MSE warm start, then every loss under test
fine-tunes a copy of it with the same data, batch order, learning-rate
schedule and epoch count.  Training the tail losses from random
initialisation is far noisier, because early in training the soft maximum
picks out one or two samples per batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import smooth_max_grad
from .synth import SceneParams, generate
from .training import Dataset, ErrorDistribution, TrainConfig, angular_error, evaluate, make_dataset, predict, train
from .vit import GazeViT, ModelConfig

log = logging.getLogger(__name__)

__all__ = [
    "ToyProtocol",
    "RunSummary",
    "outlier_scene",
    "offcenter_scene",
    "corpus",
    "compare_losses",
    "worst_sample_weights",
    "cropping_ablation",
]


def outlier_scene(seed: int, fraction: float = 0.05, kappa_deg: float = 8.0, iris: float = 125.0) -> SceneParams:
    """Eye corpus whose outlier cluster is an atypical subject.

    The cluster has a slightly different iris and a large angle between the
    optical and visual axes, so its labels sit ``kappa_deg`` degrees of yaw
    away from what the pupil position alone suggests.  Pupil motion per
    degree is raised above the default so that inlier errors stay small.
    """
    return SceneParams(
        seed=seed,
        px_per_deg=(5.0, 3.0),
        yaw_limit_deg=15.0,
        pitch_limit_deg=10.0,
        outlier_fraction=fraction,
        outlier_yaw_deg=None,
        outlier_kappa_deg=kappa_deg,
        outlier_iris=iris,
    )


def offcenter_scene(seed: int) -> SceneParams:
    """Eyes scattered across the frame, as when the headset sits differently per wearer."""
    return SceneParams(seed=seed, eye_center_jitter=(120.0, 80.0))


@dataclass(frozen=True)
class ToyProtocol:
    train_count: int = 2000
    val_count: int = 800
    train_seed: int = 10
    val_seed: int = 11
    model: ModelConfig = field(default_factory=lambda: ModelConfig(depth=3, embed_dim=16, heads=2))
    model_seed: int = 0
    warmup_epochs: int = 30
    finetune_epochs: int = 30
    finetune_lr: float = 2e-4
    batch_size: int = 64
    train_seed_order: int = 0

    def base_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.warmup_epochs, patience=self.warmup_epochs, augment=False,
                           batch_size=self.batch_size, seed=self.train_seed_order)

    def finetune_config(self, loss: str, N: float) -> TrainConfig:
        return replace(self.base_config(), loss=loss, N=N, lr=self.finetune_lr,
                       max_epochs=self.finetune_epochs, patience=self.finetune_epochs)


@dataclass(frozen=True)
class RunSummary:
    label: str
    errors: ErrorDistribution
    cluster_mean: float | None = None  # mean error on the outlier cluster
    rest_mean: float | None = None

    def line(self) -> str:
        s = f"{self.label:<22} mean {self.errors.mean:6.3f}  P90 {self.errors.p90:6.3f}  P95 {self.errors.p95:6.3f}"
        if self.cluster_mean is not None:
            s += f"  | cluster {self.cluster_mean:5.2f}  rest {self.rest_mean:5.2f}"
        return s


def corpus(scene: SceneParams, count: int, side: int, crop: bool = True) -> tuple[Dataset, np.ndarray]:
    """Preprocessed dataset plus a boolean mask of outlier frames."""
    items = generate(scene, count)
    mask = np.array([_is_outlier(scene, k) for k in range(count)])
    return make_dataset(items, side, crop=crop), mask


def _is_outlier(scene: SceneParams, index: int) -> bool:
    # Mirrors the first draw of the per-frame generator stream.
    rng = np.random.default_rng([scene.seed, index])
    return bool(scene.outlier_fraction and rng.uniform() < scene.outlier_fraction)


def _summary(label, model, val: Dataset, norm, cluster: np.ndarray | None) -> RunSummary:
    dist = evaluate(model, val, norm=norm)
    if cluster is None or not cluster.any():
        return RunSummary(label, dist)
    err = angular_error(predict(model, val, norm=norm), val.gaze)
    return RunSummary(label, dist, float(err[cluster].mean()), float(err[~cluster].mean()))


def compare_losses(runs=(("mse", 100.0), ("performance_aware", 100.0)), protocol: ToyProtocol = ToyProtocol(),
                   scene_fn=outlier_scene) -> dict[str, RunSummary]:
    """Warm-start once with MSE, then fine-tune a copy under each ``(loss, N)``.

    Keys are ``"warmup"`` and ``"<loss>@N"``.
    """
    p = protocol
    train_set, _ = corpus(scene_fn(p.train_seed), p.train_count, p.model.image_side)
    val, cluster = corpus(scene_fn(p.val_seed), p.val_count, p.model.image_side)
    warm = train(GazeViT(p.model, seed=p.model_seed), train_set, p.base_config(), val=val)
    out = {"warmup": _summary("warmup (mse)", warm.model, val, warm.norm, cluster)}
    for loss, N in runs:
        r = train(warm.model.copy(), train_set, p.finetune_config(loss, N), val=val, norm=warm.norm)
        key = f"{loss}@{N:g}"
        out[key] = _summary(key, r.model, val, r.norm, cluster)
        log.info("%s", out[key].line())
    return out


def worst_sample_weights(batch_errors, Ns=(10, 50, 100)) -> list[float]:
    """Share of the gradient that the soft maximum gives its worst sample, per N."""
    x = np.asarray(batch_errors, dtype=np.float64)
    worst = int(np.argmax(x))
    return [float(smooth_max_grad(x, N)[worst]) for N in Ns]


def cropping_ablation(protocol: ToyProtocol = ToyProtocol(), scene_fn=offcenter_scene,
                      epochs: int | None = None) -> dict[str, RunSummary]:
    """Train the same model with and without pupil-centred cropping."""
    p = protocol
    epochs = epochs or p.warmup_epochs
    cfg = replace(p.base_config(), max_epochs=epochs, patience=epochs)
    out = {}
    for label, crop in (("cropped", True), ("uncropped", False)):
        train_set, _ = corpus(scene_fn(p.train_seed), p.train_count, p.model.image_side, crop=crop)
        val, _ = corpus(scene_fn(p.val_seed), p.val_count, p.model.image_side, crop=crop)
        r = train(GazeViT(p.model, seed=p.model_seed), train_set, cfg, val=val)
        out[label] = _summary(label, r.model, val, r.norm, None)
    return out
