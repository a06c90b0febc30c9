"""Gaze training objectives.

All losses act on per-sample squared errors ``x_d = ||pred_d - truth_d||^2``
(radians squared).  ``smooth_max`` is the log-sum-exp soft maximum with
temperature ``1/N``; the performance-aware loss converts it to an error
angle and reads the rendering latency it would cost off a
:class:`~fovtrack.geometry.LatencyProfile`.

Each loss has a matching ``*_grad`` returning ``d loss / d x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .geometry import LatencyProfile

__all__ = [
    "LOSS_KINDS",
    "LossConfig",
    "batch_errors",
    "mse_loss",
    "mse_grad",
    "smooth_max",
    "smooth_max_grad",
    "error_angle",
    "performance_aware_loss",
    "performance_aware_grad",
    "multires_loss",
    "multires_grad",
    "objective",
]

LOSS_KINDS = ("mse", "smooth_max", "performance_aware", "multires")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mse"
    N: float = 100.0
    profile: LatencyProfile | None = None
    theta_i: float = 5.0
    exit_weights: Mapping[int, float] | None = None
    exits: tuple[int, ...] | None = None  # None: all exits for multires, final exit otherwise

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.N > 0:
            raise ValueError("N must be positive")
        if self.kind in ("performance_aware", "multires") and self.profile is None:
            raise ValueError(f"{self.kind} loss needs a latency profile")

    def weight(self, exit_block: int) -> float:
        if self.exit_weights is None:
            return 1.0
        return float(self.exit_weights.get(exit_block, 1.0))


def _errors(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("batch errors must be a non-empty 1-D array")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("batch errors must be finite and non-negative")
    return x


def batch_errors(pred, truth) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return (d * d).sum(-1)


def mse_loss(x) -> float:
    return float(_errors(x).mean())


def mse_grad(x) -> np.ndarray:
    x = _errors(x)
    return np.full_like(x, 1.0 / x.size)


def smooth_max(x, N: float) -> float:
    """(1/N) ln sum exp(N x), evaluated as m + (1/N) ln sum exp(N (x - m))."""
    x = _errors(x)
    m = x.max()
    return float(m + math.log(np.exp(N * (x - m)).sum()) / N)


def smooth_max_grad(x, N: float) -> np.ndarray:
    """softmax(N x): the weight each sample receives."""
    x = _errors(x)
    e = np.exp(N * (x - x.max()))
    return e / e.sum()


def error_angle(sq_err: float) -> float:
    """Degrees of error represented by a squared radian error."""
    return math.degrees(math.sqrt(sq_err))


def performance_aware_loss(x, cfg: LossConfig) -> float:
    """Rendering latency (ms) at eccentricity theta_i + smooth-max error angle."""
    s = smooth_max(x, cfg.N)
    return float(cfg.profile(cfg.theta_i + error_angle(s)))


def performance_aware_grad(x, cfg: LossConfig) -> np.ndarray:
    s = smooth_max(x, cfg.N)
    theta = cfg.theta_i + error_angle(s)
    # d/ds of degrees(sqrt(s)); floored so a perfect batch still has a finite gradient.
    dangle = math.degrees(0.5 / math.sqrt(max(s, 1e-24)))
    return cfg.profile.slope(theta) * dangle * smooth_max_grad(x, cfg.N)


def multires_loss(per_exit: Mapping[int, np.ndarray], cfg: LossConfig, exits=None) -> float:
    exits = list(per_exit) if exits is None else list(exits)
    missing = [l for l in exits if l not in per_exit]
    if missing:
        raise KeyError(f"missing exits {missing}")
    return math.fsum(cfg.weight(l) * performance_aware_loss(per_exit[l], cfg) for l in exits)


def multires_grad(per_exit: Mapping[int, np.ndarray], cfg: LossConfig) -> dict[int, np.ndarray]:
    return {l: cfg.weight(l) * performance_aware_grad(x, cfg) for l, x in per_exit.items()}


_SINGLE = {
    "mse": (lambda x, c: mse_loss(x), lambda x, c: mse_grad(x)),
    "smooth_max": (lambda x, c: smooth_max(x, c.N), lambda x, c: smooth_max_grad(x, c.N)),
    "performance_aware": (performance_aware_loss, performance_aware_grad),
    "multires": (performance_aware_loss, performance_aware_grad),
}


def objective(preds: Mapping[int, np.ndarray], truth, cfg: LossConfig):
    """Loss over model exits and ``d loss / d prediction`` per exit.

    ``preds`` maps exit block to ``(B, 2)`` predictions; ``truth`` is ``(B, 2)``.
    """
    if cfg.exits is not None:
        exits = list(cfg.exits)
    elif cfg.kind == "multires":
        exits = sorted(preds)
    else:
        exits = [max(preds)]
    value_fn, grad_fn = _SINGLE[cfg.kind]
    truth = np.asarray(truth, dtype=np.float64)
    total, dpreds = 0.0, {}
    for l in exits:
        diff = preds[l] - truth
        x = (diff * diff).sum(-1)
        w = cfg.weight(l)
        total += w * value_fn(x, cfg)
        dpreds[l] = (w * grad_fn(x, cfg))[:, None] * 2.0 * diff
    return total, dpreds
