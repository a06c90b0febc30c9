"""Foveal-region geometry, rendering-latency profiles and per-frame latency.

The foveal radius on screen grows with the tangent of the eccentricity
angle.  Tracking error ``delta_theta`` inflates the rendered fovea from
``theta_i`` to ``theta_f = theta_i + delta_theta``; the cost of that
inflation is read off a :class:`LatencyProfile`, a monotone piecewise-linear
map from eccentricity (degrees) to rendering latency (ms).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "FovealGeometry",
    "FovealRegion",
    "LatencyProfile",
    "LatencyBudget",
    "ProfileError",
    "foveal_radius",
    "fit_profile",
    "eval_latency",
    "total_latency",
    "load_profile",
    "save_profile",
    "bundled_profile",
    "BUNDLED_PROFILES",
]

RESOLUTION_LABELS = ("720P", "1080P", "1440P", "custom")


class ProfileError(ValueError):
    """Raised when latency samples do not form a valid monotone profile."""


@dataclass(frozen=True)
class FovealGeometry:
    theta_i: float
    d: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.theta_i < 90.0:
            raise ValueError(f"theta_i must lie in (0, 90) degrees, got {self.theta_i}")
        if self.d <= 0:
            raise ValueError(f"d must be positive, got {self.d}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


@dataclass(frozen=True)
class FovealRegion:
    r_i: float
    r_f: float
    c: float
    theta_f: float


def foveal_radius(geom: FovealGeometry, delta_theta: float) -> FovealRegion:
    """Inflate the fovea of ``geom`` by a tracking error of ``delta_theta`` degrees.

    Both radii use ``rho * d * tan(theta)`` so that they are in pixels.
    """
    theta_f = geom.theta_i + delta_theta
    if delta_theta < 0 or not 0.0 <= theta_f < 90.0:
        raise ValueError(
            f"angle out of range: theta_i + delta_theta = {theta_f} must lie in [theta_i, 90)"
        )
    scale = geom.rho * geom.d
    r_i = scale * math.tan(math.radians(geom.theta_i))
    r_f = scale * math.tan(math.radians(theta_f))
    return FovealRegion(r_i=r_i, r_f=r_f, c=r_f - r_i, theta_f=theta_f)


@dataclass(frozen=True)
class LatencyProfile:
    """Piecewise-linear eccentricity -> latency map.

    Below the first knot the latency is clamped to the first value; beyond the
    last knot the last segment is extended linearly.
    """

    eccentricity: tuple[float, ...]
    latency: tuple[float, ...]
    device_label: str = ""
    resolution_label: str = "custom"
    _x: np.ndarray = field(init=False, repr=False, compare=False)
    _y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.eccentricity, dtype=float)
        y = np.asarray(self.latency, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ProfileError("a profile needs at least two (eccentricity, latency) knots")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ProfileError("profile knots must be finite")
        for k in range(x.size - 1):
            if not x[k + 1] > x[k]:
                raise ProfileError(
                    f"eccentricities must be strictly increasing: {x[k]} then {x[k + 1]}"
                )
            if y[k + 1] < y[k]:
                raise ProfileError(
                    "latency must be non-decreasing in eccentricity: "
                    f"({x[k]}, {y[k]}) -> ({x[k + 1]}, {y[k + 1]})"
                )
        if np.any(y < 0):
            raise ProfileError("latencies must be non-negative")
        if self.resolution_label not in RESOLUTION_LABELS:
            raise ProfileError(
                f"resolution_label must be one of {RESOLUTION_LABELS}, got {self.resolution_label!r}"
            )
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "_x", x)
        object.__setattr__(self, "_y", y)

    @property
    def knots(self) -> list[tuple[float, float]]:
        return list(zip(self.eccentricity, self.latency))

    def _segment(self, theta: np.ndarray) -> np.ndarray:
        # Segment k spans [x_k, x_{k+1}); a knot belongs to the segment on its right.
        k = np.searchsorted(self._x, theta, side="right") - 1
        return np.clip(k, 0, self._x.size - 2)

    def slope(self, theta):
        """Right-hand derivative dU/dtheta (ms per degree)."""
        theta = np.asarray(theta, dtype=float)
        k = self._segment(theta)
        s = (self._y[k + 1] - self._y[k]) / (self._x[k + 1] - self._x[k])
        s = np.where(theta < self._x[0], 0.0, s)
        return s if s.ndim else float(s)

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0) or not np.all(np.isfinite(theta)):
            raise ValueError("eccentricity must be finite and non-negative")
        k = self._segment(theta)
        x0, x1 = self._x[k], self._x[k + 1]
        y0, y1 = self._y[k], self._y[k + 1]
        t = (theta - x0) / (x1 - x0)
        out = y0 + t * (y1 - y0)
        # Knots are returned exactly, without interpolation round-off.
        out = np.where(theta == x0, y0, out)
        out = np.where(theta == x1, y1, out)  # the last knot falls in the extrapolated segment
        out = np.where(theta < self._x[0], self._y[0], out)
        return out if out.ndim else float(out)


def fit_profile(
    samples: Iterable[tuple[float, float]],
    device_label: str = "",
    resolution_label: str = "custom",
) -> LatencyProfile:
    """Build a profile from (eccentricity_deg, latency_ms) samples in any order."""
    pts = sorted((float(e), float(t)) for e, t in samples)
    if len(pts) < 2:
        raise ProfileError("need at least two samples")
    for (e0, _), (e1, _) in zip(pts, pts[1:]):
        if e0 == e1:
            raise ProfileError(f"duplicate eccentricity {e0}")
    return LatencyProfile(
        eccentricity=tuple(p[0] for p in pts),
        latency=tuple(p[1] for p in pts),
        device_label=device_label,
        resolution_label=resolution_label,
    )


def eval_latency(profile: LatencyProfile, theta_f, with_slope: bool = False):
    """Rendering latency at eccentricity ``theta_f`` (degrees).

    With ``with_slope=True`` returns ``(latency, dlatency/dtheta)`` using the
    right-hand slope at knots.
    """
    value = profile(theta_f)
    if with_slope:
        return value, profile.slope(theta_f)
    return value


@dataclass(frozen=True)
class LatencyBudget:
    t_sensing_ms: float = 0.0
    t_comm_ms: float = 0.0
    t_tracking_ms: float = 0.0
    t_fr_ms: float = 0.0

    def __post_init__(self):
        for name in ("t_sensing_ms", "t_comm_ms", "t_tracking_ms", "t_fr_ms"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @property
    def total_ms(self) -> float:
        return total_latency(self)


def total_latency(budget: LatencyBudget) -> float:
    return math.fsum(
        (budget.t_sensing_ms, budget.t_comm_ms, budget.t_tracking_ms, budget.t_fr_ms)
    )


# --- CSV I/O ---------------------------------------------------------------

PROFILE_HEADER = ("eccentricity_deg", "latency_ms")


def _read_profile_rows(lines: Sequence[str] | io.TextIOBase) -> list[tuple[float, float]]:
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != PROFILE_HEADER:
        raise ProfileError(f"expected header {','.join(PROFILE_HEADER)}, got {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ProfileError(f"line {lineno}: expected 2 columns, got {len(row)}")
        try:
            rows.append((float(row[0]), float(row[1])))
        except ValueError as exc:
            raise ProfileError(f"line {lineno}: {exc}") from None
    return rows


def load_profile(
    path: str | Path, device_label: str | None = None, resolution_label: str = "custom"
) -> LatencyProfile:
    """Read a profile CSV (``eccentricity_deg,latency_ms``); rows must already be monotone."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = _read_profile_rows(fh)
    return fit_profile(rows, device_label or path.stem, resolution_label)


def save_profile(profile: LatencyProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for e, t in profile.knots:
            w.writerow([repr(e), repr(t)])


# Synthetic fixtures shaped like the HMD curves (not measurements).
BUNDLED_PROFILES = {
    "720P": "hmd_720p.csv",
    "1080P": "hmd_1080p.csv",
    "1440P": "hmd_1440p.csv",
}


def bundled_profile(resolution: str = "1080P") -> LatencyProfile:
    try:
        name = BUNDLED_PROFILES[resolution]
    except KeyError:
        raise KeyError(f"no bundled profile for {resolution!r}; have {sorted(BUNDLED_PROFILES)}")
    text = resources.files("fovtrack.data").joinpath("profiles", name).read_text("utf-8")
    rows = _read_profile_rows(io.StringIO(text))
    return fit_profile(rows, device_label="hmd-synthetic", resolution_label=resolution)
