"""Pick the gaze-model depth with the lowest tracking plus rendering latency.

A deeper model tracks more accurately, so the foveal region can shrink and
rendering gets cheaper, but inference costs more.  ``select`` evaluates every
available depth and returns the cheapest total.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .geometry import LatencyBudget, LatencyProfile, bundled_profile

__all__ = [
    "DEPTH_HEADER",
    "DepthEntry",
    "DepthProfile",
    "SelectionQuery",
    "Selection",
    "load_depth_profile",
    "save_depth_profile",
    "bundled_depth_profile",
    "render_latency_for_depth",
    "select",
]

DEPTH_HEADER = ("depth", "t_tracking_ms", "p90_deg", "p95_deg", "flops")
PERCENTILES = ("P90", "P95")


@dataclass(frozen=True)
class DepthEntry:
    depth: int
    t_tracking_ms: float
    p90_deg: float
    p95_deg: float
    flops: float = 0.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if not self.t_tracking_ms > 0:
            raise ValueError(f"depth {self.depth}: tracking latency must be positive")
        if not (0 <= self.p90_deg <= self.p95_deg):
            raise ValueError(f"depth {self.depth}: need 0 <= P90 <= P95")

    def error(self, percentile: str) -> float:
        return self.p90_deg if percentile == "P90" else self.p95_deg


@dataclass(frozen=True)
class DepthProfile:
    entries: tuple[DepthEntry, ...]

    def __post_init__(self):
        depths = [e.depth for e in self.entries]
        if len(set(depths)) != len(depths):
            raise ValueError("depths must be distinct")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.depth)))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class SelectionQuery:
    resolution: str
    profile: LatencyProfile
    percentile: str = "P95"
    theta_i: float = 5.0
    t_sensing_ms: float = 0.0
    t_comm_ms: float = 0.0

    def __post_init__(self):
        if self.percentile not in PERCENTILES:
            raise ValueError(f"percentile must be one of {PERCENTILES}, got {self.percentile!r}")
        if not self.theta_i > 0:
            raise ValueError("theta_i must be positive")

    @classmethod
    def bundled(cls, resolution: str, **kw) -> "SelectionQuery":
        return cls(resolution=resolution, profile=bundled_profile(resolution), **kw)


@dataclass(frozen=True)
class Selection:
    depth: int
    budget: LatencyBudget

    @property
    def t_tracking_ms(self) -> float:
        return self.budget.t_tracking_ms

    @property
    def t_fr_ms(self) -> float:
        return self.budget.t_fr_ms

    @property
    def t_total_ms(self) -> float:
        """Tracking plus rendering; sensing and link overheads are reported in ``budget``."""
        return self.budget.t_tracking_ms + self.budget.t_fr_ms

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "t_tracking_ms": self.t_tracking_ms,
            "t_fr_ms": self.t_fr_ms,
            "t_total_ms": self.t_total_ms,
        }


def render_latency_for_depth(entry: DepthEntry, query: SelectionQuery) -> float:
    return float(query.profile(query.theta_i + entry.error(query.percentile)))


def select(depths: DepthProfile | Iterable[DepthEntry], query: SelectionQuery) -> Selection:
    entries = list(depths)
    if not entries:
        raise ValueError("cannot select from an empty depth set")
    best, best_total = None, math.inf
    for e in sorted(entries, key=lambda e: e.depth):
        total = e.t_tracking_ms + render_latency_for_depth(e, query)
        if total < best_total:  # strict: ties stay with the smaller depth
            best, best_total = e, total
    budget = LatencyBudget(query.t_sensing_ms, query.t_comm_ms, best.t_tracking_ms,
                           render_latency_for_depth(best, query))
    return Selection(best.depth, budget)


def load_depth_profile(path) -> DepthProfile:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != DEPTH_HEADER:
        raise ValueError(f"{path}: header must be {','.join(DEPTH_HEADER)}")
    entries = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            d, t, p90, p95, fl = row
            entries.append(DepthEntry(int(d), float(t), float(p90), float(p95), float(fl)))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return DepthProfile(tuple(entries))


def save_depth_profile(profile: DepthProfile, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEPTH_HEADER)
        for e in profile:
            w.writerow([e.depth, repr(e.t_tracking_ms), repr(e.p90_deg), repr(e.p95_deg), repr(e.flops)])


def bundled_depth_profile() -> DepthProfile:
    with resources.as_file(resources.files("fovtrack.data") / "depth_profile.csv") as p:
        return load_depth_profile(p)
