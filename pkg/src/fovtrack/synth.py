"""Synthetic near-eye frames with known gaze, corpus I/O and augmentations.

The renderer is deliberately schematic: skin background, an elliptical sclera,
an iris and a dark pupil whose centre moves affinely with (pitch, yaw), a
few thin eyelash strokes and Gaussian sensor noise.  Intensities are ordered
pupil < iris < sclera so the analytical cropper has something to find.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .images import as_frame, read_image, resize, write_image, ImageFormatError

log = logging.getLogger(__name__)

__all__ = [
    "GazeVector",
    "LabeledFrame",
    "SceneParams",
    "AugmentConfig",
    "GeometryError",
    "generate",
    "render",
    "flip_right_eye",
    "augment",
    "augment_image",
    "normalize",
    "load_corpus",
    "save_corpus",
]

LABELS_HEADER = ("filename", "eye", "pitch_rad", "yaw_rad")


class GeometryError(ValueError):
    """Scene parameters that cannot produce a valid frame."""


class GazeVector(NamedTuple):
    pitch: float
    yaw: float


@dataclass
class LabeledFrame:
    frame: np.ndarray
    gaze: GazeVector
    pupil_center: tuple[float, float] | None = None
    eye: str = "left"
    name: str = ""


@dataclass(frozen=True)
class SceneParams:
    width: int = 640
    height: int = 400
    eye_center: tuple[float, float] = (320.0, 200.0)
    eye_center_jitter: tuple[float, float] = (0.0, 0.0)  # uniform +- (x, y) per frame
    sclera_axes: tuple[float, float] = (160.0, 84.0)
    iris_radius: tuple[float, float] = (52.0, 60.0)
    pupil_radius: tuple[float, float] = (20.0, 26.0)
    pitch_limit_deg: float = 12.0
    yaw_limit_deg: float = 20.0
    px_per_deg: tuple[float, float] = (3.0, 2.0)  # pupil shift per degree of (yaw, pitch)
    pupil_jitter_px: float = 1.0
    eyelash_count: int = 12
    noise_sigma: float = 4.0
    skin: float = 170.0
    sclera: float = 220.0
    iris: float = 115.0
    pupil: float = 25.0
    lash: float = 40.0
    outlier_fraction: float = 0.0
    outlier_yaw_deg: tuple[float, float] | None = (24.0, 30.0)  # |yaw| range; None keeps the inlier range
    outlier_gain: float = 1.0  # outlier pupil travel per degree relative to px_per_deg; < 0 mirrors it
    outlier_iris: float | None = None  # outlier iris intensity; None keeps ``iris``
    outlier_kappa_deg: float = 0.0  # outlier visual-axis offset: label yaw = rendered yaw + kappa
    right_eye_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GeometryError("frame dimensions must be positive")
        lo, hi = self.pupil_radius
        ilo, ihi = self.iris_radius
        if not 0 < lo <= hi:
            raise GeometryError("pupil radius range must be positive and ordered")
        if not 0 < ilo <= ihi:
            raise GeometryError("iris radius range must be positive and ordered")
        if not hi < ilo:
            raise GeometryError("pupil radius must be smaller than iris radius")
        if not (0 <= self.outlier_fraction < 1 and 0 <= self.right_eye_fraction <= 1):
            raise GeometryError("fractions must lie in [0, 1)")
        gain = 1.0
        max_yaw = self.yaw_limit_deg
        if self.outlier_fraction:
            if self.outlier_gain == 0:
                raise GeometryError("outlier gain must be non-zero")
            gain = max(1.0, abs(self.outlier_gain))
            if self.outlier_yaw_deg is not None:
                max_yaw = max(max_yaw, self.outlier_yaw_deg[1])
        dx = max_yaw * self.px_per_deg[0] * gain + self.pupil_jitter_px
        dy = self.pitch_limit_deg * self.px_per_deg[1] * gain + self.pupil_jitter_px
        a, b = self.sclera_axes
        # The pupil must sit inside the visible sclera opening for every gaze.
        for sx, sy in ((1, 1), (1, 0), (0, 1)):
            px, py = sx * dx + (hi if sx else 0), sy * dy + (hi if sy else 0)
            if (px / a) ** 2 + (py / b) ** 2 > 1.0:
                raise GeometryError(
                    "pupil leaves the sclera at the gaze limits: "
                    f"offset ({dx:.1f}, {dy:.1f}) px with pupil radius {hi} vs sclera axes {a}x{b}"
                )
        cx, cy = self.eye_center
        jx, jy = self.eye_center_jitter
        if cx - jx - a < 0 or cx + jx + a > self.width or cy - jy - b < 0 or cy + jy + b > self.height:
            raise GeometryError("eye (sclera ellipse plus centre jitter) does not fit inside the frame")
        irises = [self.iris] + ([self.outlier_iris] if self.outlier_iris is not None else [])
        if not all(self.pupil < i < self.sclera for i in irises):
            raise GeometryError("intensities must satisfy pupil < iris < sclera")


def _frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


@lru_cache(maxsize=8)
def _background(h: int, w: int, skin: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # Soft shading so the background is not a flat plateau.
    bg = skin - 12.0 * ((xx - w / 2) / w) ** 2 - 10.0 * ((yy - h / 2) / h) ** 2
    bg.flags.writeable = False
    return bg


def _box(cx, cy, rx, ry, h, w):
    y0, y1 = max(int(math.floor(cy - ry)), 0), min(int(math.ceil(cy + ry)) + 1, h)
    x0, x1 = max(int(math.floor(cx - rx)), 0), min(int(math.ceil(cx + rx)) + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    return (slice(y0, y1), slice(x0, x1)), yy, xx


def render(params: SceneParams, gaze: GazeVector, eye_center, pupil_r, iris_r, lashes,
           noise_rng=None, pupil_jitter=(0.0, 0.0)):
    """Rasterise one frame; returns (frame, pupil_center).  No noise if ``noise_rng`` is None.

    The pupil centre is ``eye_center + (yaw, -pitch) * px_per_deg + pupil_jitter``.
    """
    h, w = params.height, params.width
    ex, ey = eye_center
    a, b = params.sclera_axes
    px = ex + math.degrees(gaze.yaw) * params.px_per_deg[0] + pupil_jitter[0]
    py = ey - math.degrees(gaze.pitch) * params.px_per_deg[1] + pupil_jitter[1]

    img = _background(h, w, params.skin).copy()
    sl, yy, xx = _box(ex, ey, a, b, h, w)
    region = img[sl]
    sclera = ((xx - ex) / a) ** 2 + ((yy - ey) / b) ** 2 <= 1.0
    region[sclera] = params.sclera
    d2 = (xx - px) ** 2 + (yy - py) ** 2
    region[sclera & (d2 <= iris_r**2)] = params.iris
    # The pupil is always inside the sclera (checked by SceneParams.validate).
    region[d2 <= pupil_r**2] = params.pupil
    for x0, y0, x1, y1 in lashes:
        n = int(max(abs(x1 - x0), abs(y1 - y0))) * 2 + 1
        lx = np.linspace(x0, x1, n)
        ly = np.linspace(y0, y1, n)
        for ox in (0, 1):
            cols = np.clip(np.round(lx).astype(int) + ox, 0, w - 1)
            rows = np.clip(np.round(ly).astype(int), 0, h - 1)
            img[rows, cols] = params.lash
    if noise_rng is not None and params.noise_sigma > 0:
        img += params.noise_sigma * noise_rng.standard_normal(size=img.shape, dtype=np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), (px, py)


def _sample_lashes(params: SceneParams, eye_center, rng) -> list[tuple[float, float, float, float]]:
    ex, ey = eye_center
    a, b = params.sclera_axes
    out = []
    for _ in range(params.eyelash_count):
        t = rng.uniform(-0.85, 0.85) * math.pi / 2
        bx, by = ex + a * math.sin(t), ey - b * math.cos(t) - 3.0
        length = rng.uniform(18.0, 35.0)
        ang = -math.pi / 2 + 0.8 * t + rng.uniform(-0.2, 0.2)
        out.append((bx, by, bx + length * math.cos(ang), by + length * math.sin(ang)))
    return out


def _sample_frame(params: SceneParams, index: int) -> LabeledFrame:
    rng = _frame_rng(params.seed, index)
    look, kappa = params, 0.0
    if params.outlier_fraction and rng.uniform() < params.outlier_fraction:
        kappa = params.outlier_kappa_deg
        if params.outlier_yaw_deg is None:
            yaw = rng.uniform(-params.yaw_limit_deg, params.yaw_limit_deg)
        else:
            yaw = rng.uniform(*params.outlier_yaw_deg) * rng.choice((-1.0, 1.0))
        g = params.outlier_gain
        look = replace(params, px_per_deg=(params.px_per_deg[0] * g, params.px_per_deg[1] * g),
                       iris=params.iris if params.outlier_iris is None else params.outlier_iris)
    else:
        yaw = rng.uniform(-params.yaw_limit_deg, params.yaw_limit_deg)
    pitch = rng.uniform(-params.pitch_limit_deg, params.pitch_limit_deg)
    gaze = GazeVector(math.radians(pitch), math.radians(yaw))
    jx, jy = params.eye_center_jitter
    ec = (
        params.eye_center[0] + rng.uniform(-jx, jx),
        params.eye_center[1] + rng.uniform(-jy, jy),
    )
    jitter = rng.uniform(-1.0, 1.0, size=2) * params.pupil_jitter_px / math.sqrt(2)
    pupil_r = rng.uniform(*params.pupil_radius)
    iris_r = rng.uniform(*params.iris_radius)
    lashes = _sample_lashes(params, ec, rng)
    right = params.right_eye_fraction and rng.uniform() < params.right_eye_fraction
    frame, center = render(look, gaze, ec, pupil_r, iris_r, lashes, noise_rng=rng,
                           pupil_jitter=(float(jitter[0]), float(jitter[1])))
    if kappa:
        gaze = GazeVector(gaze.pitch, gaze.yaw + math.radians(kappa))
    item = LabeledFrame(frame, gaze, center, "left", f"frame_{index:06d}")
    if right:
        # A right eye is the mirror image of a left eye with the opposite yaw.
        item = flip_right_eye(item, "right")
    return item


def generate(params: SceneParams, count: int, start: int = 0) -> list[LabeledFrame]:
    """Render ``count`` frames; frame ``k`` depends only on ``(seed, start + k)``."""
    params.validate()
    if count < 0:
        raise ValueError("count must be non-negative")
    return [_sample_frame(params, start + k) for k in range(count)]


def flip_right_eye(item: LabeledFrame, eye: str | None = None) -> LabeledFrame:
    """Mirror right-eye frames onto the left-eye convention (yaw negated)."""
    eye = item.eye if eye is None else eye
    if eye != "right":
        return item
    w = item.frame.shape[1]
    center = None
    if item.pupil_center is not None:
        center = (w - 1 - item.pupil_center[0], item.pupil_center[1])
    return LabeledFrame(
        frame=item.frame[:, ::-1].copy(),
        gaze=GazeVector(item.gaze.pitch, -item.gaze.yaw),
        pupil_center=center,
        eye="left" if item.eye == "right" else "right",
        name=item.name,
    )


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.8, 1.0)
    max_shift: float = 0.10
    mean: float = 0.5
    std: float = 0.25

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("scale_range must lie inside (0, 1] and be ordered")
        if not 0 <= self.max_shift < 1:
            raise ValueError("max_shift must lie in [0, 1)")
        if self.std <= 0:
            raise ValueError("std must be positive")


def normalize(image, cfg: AugmentConfig) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) / 255.0 - cfg.mean) / cfg.std


def augment_image(image, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop (scale in ``scale_range``), random shift, resample to the input size, normalise."""
    from scipy import ndimage

    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    s = rng.uniform(*cfg.scale_range)
    dx = rng.uniform(-cfg.max_shift, cfg.max_shift) * w
    dy = rng.uniform(-cfg.max_shift, cfg.max_shift) * h
    if s == 1.0 and dx == 0.0 and dy == 0.0:
        return normalize(img, cfg)
    # Output pixel i samples the crop at (centre + shift) with the crop scaled by s.
    ys = (np.arange(h) + 0.5 - h / 2) * s + h / 2 - 0.5 + dy
    xs = (np.arange(w) + 0.5 - w / 2) * s + w / 2 - 0.5 + dx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return normalize(out, cfg)


def augment(item: LabeledFrame, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledFrame:
    """Augmented copy of ``item``; the gaze label is left untouched."""
    return LabeledFrame(augment_image(item.frame, cfg, rng), item.gaze, None, item.eye, item.name)


# --- corpus I/O ------------------------------------------------------------


def save_corpus(items: Sequence[LabeledFrame], directory: str | Path, fmt: str = "pgm") -> list[str]:
    """Write images plus ``labels.csv`` (and ``pupils.csv`` when centres are known)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for k, item in enumerate(items):
            name = f"{item.name or f'frame_{k:06d}'}.{fmt}"
            write_image(directory / name, item.frame)
            w.writerow([name, item.eye, repr(float(item.gaze.pitch)), repr(float(item.gaze.yaw))])
            names.append(name)
    if items and all(it.pupil_center is not None for it in items):
        with open(directory / "pupils.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("filename", "pupil_x", "pupil_y"))
            for name, it in zip(names, items):
                w.writerow([name, repr(float(it.pupil_center[0])), repr(float(it.pupil_center[1]))])
    return names


_IMAGE_SUFFIXES = {".pgm", ".png"}


def load_corpus(directory: str | Path, return_skipped: bool = False):
    """Pair images in ``directory`` with rows of its ``labels.csv``.

    Malformed rows, rows naming missing images and unlabeled images are
    skipped and reported.  All frames must share one size.
    """
    directory = Path(directory)
    images = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    labels_path = directory / "labels.csv"
    skipped: list[str] = []
    if not labels_path.exists():
        if not images:
            log.warning("corpus directory %s is empty", directory)
            return ([], skipped) if return_skipped else []
        raise FileNotFoundError(f"{labels_path} not found")

    pupils = {}
    if (directory / "pupils.csv").exists():
        with open(directory / "pupils.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                try:
                    pupils[row["filename"]] = (float(row["pupil_x"]), float(row["pupil_y"]))
                except (KeyError, TypeError, ValueError):
                    pass

    rows = {}
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LABELS_HEADER:
            raise ValueError(f"{labels_path}: expected header {','.join(LABELS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                name, eye, pitch, yaw = row
                if eye not in ("left", "right"):
                    raise ValueError(f"eye must be left/right, got {eye!r}")
                rows[name] = (eye, GazeVector(float(pitch), float(yaw)))
            except ValueError as exc:
                skipped.append(f"labels.csv:{lineno}: {exc}")

    out = []
    shape = None
    image_names = {p.name for p in images}
    for name in rows:
        if name not in image_names:
            skipped.append(f"{name}: image missing")
    for path in images:
        if path.name not in rows:
            skipped.append(f"{path.name}: no label row")
            continue
        try:
            frame = read_image(path)
        except ImageFormatError as exc:
            skipped.append(str(exc))
            continue
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise ValueError(f"{path.name}: size {frame.shape[::-1]} differs from corpus size {shape[::-1]}")
        eye, gaze = rows[path.name]
        out.append(LabeledFrame(frame, gaze, pupils.get(path.name), eye, path.stem))
    for msg in skipped:
        log.warning("skipped %s", msg)
    return (out, skipped) if return_skipped else out


def scene_from_json(path: str | Path) -> SceneParams:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return scene_from_dict(data)


def scene_from_dict(data: dict) -> SceneParams:
    fields = {}
    for k, v in data.items():
        fields[k] = tuple(v) if isinstance(v, list) else v
    return SceneParams(**fields)


def scene_to_dict(params: SceneParams) -> dict:
    return asdict(params)
