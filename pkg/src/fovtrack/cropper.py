"""Analytical pupil localisation and fixed-size eye-region cropping.

Pipeline: mask the frame border, inverse-binarise dark pixels, open the mask
to remove noise, take the largest 8-connected component and accept it as the
pupil if it is round and big enough.  A 450x200 window is then centred on the
pupil centroid and pushed back inside the frame.

A frame-difference event test decides whether the previous gaze can be reused
instead of recomputing; :class:`CropSession` holds that state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .images import as_frame

__all__ = [
    "ConnectedComponent",
    "CropWindow",
    "CropperConfig",
    "EventParams",
    "Decision",
    "CropSession",
    "border_mask",
    "otsu_threshold",
    "dark_class_threshold",
    "inverse_binarize",
    "morph_open",
    "largest_cc",
    "boundary_length",
    "roundness",
    "is_pupil",
    "crop_around",
    "event_map",
    "event_decision",
    "find_pupil",
    "locate_and_crop",
]

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConnectedComponent:
    ys: np.ndarray
    xs: np.ndarray
    shape: tuple[int, int]

    @property
    def area(self) -> int:
        return int(self.ys.size)

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) in pixels."""
        return float(self.xs.mean()), float(self.ys.mean())

    @property
    def top_left(self) -> tuple[int, int]:
        """First pixel in raster order, as (y, x)."""
        k = np.lexsort((self.xs, self.ys))[0]
        return int(self.ys[k]), int(self.xs[k])

    @property
    def perimeter(self) -> float:
        return boundary_length(self)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[self.ys, self.xs] = True
        return m

    def pixel_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(zip(self.ys.tolist(), self.xs.tolist()))


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    width: int = 450
    height: int = 200

    @property
    def center(self) -> tuple[float, float]:
        return self.x0 + self.width / 2, self.y0 + self.height / 2

    def extract(self, frame: np.ndarray) -> np.ndarray:
        return frame[self.y0 : self.y0 + self.height, self.x0 : self.x0 + self.width]

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "width": self.width, "height": self.height}


@dataclass(frozen=True)
class EventParams:
    beta1: float = 0.2
    beta2: int = 500

    def __post_init__(self):
        if not self.beta1 > 0:
            raise ValueError("beta1 must be positive")
        if self.beta2 < 0 or int(self.beta2) != self.beta2:
            raise ValueError("beta2 must be a non-negative integer")


@dataclass(frozen=True)
class CropperConfig:
    margin: int = 10
    threshold: int | None = None  # None: dark_class_threshold on the unmasked interior
    max_dark_fraction: float = 0.02
    kernel_radius: int = 2
    min_roundness: float = 0.6
    min_area: int = 100
    window: tuple[int, int] = (450, 200)


# --- pipeline stages -------------------------------------------------------


def border_mask(frame, margin: int) -> np.ndarray:
    """Paint a ``margin``-pixel band around the frame white (255)."""
    frame = as_frame(frame)
    h, w = frame.shape
    if margin < 0 or 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} too large for a {w}x{h} frame")
    out = frame.copy()
    if margin:
        out[:margin, :] = 255
        out[-margin:, :] = 255
        out[:, :margin] = 255
        out[:, -margin:] = 255
    return out


def otsu_threshold(values) -> int:
    """Otsu's threshold on 8-bit values, returned in ``inverse_binarize`` form.

    Pixels strictly below the returned value form the dark class.
    """
    hist = np.bincount(np.asarray(values, dtype=np.uint8).ravel(), minlength=256).astype(float)
    total = hist.sum()
    if total == 0:
        return 0
    levels = np.arange(256, dtype=float)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    w1 = total - w0
    mu_t = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 / total - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    # Dark class is [0, k]; binarisation is strict, hence k + 1.
    return int(np.argmax(between)) + 1


def dark_class_threshold(values, max_dark_fraction: float = 0.02) -> int:
    """Otsu applied repeatedly to the dark class until it covers at most
    ``max_dark_fraction`` of the pixels.

    Plain Otsu splits a near-eye frame into sclera versus everything else;
    descending into the dark side isolates the pupil.
    """
    vals = np.asarray(values, dtype=np.uint8).ravel()
    n = vals.size
    t = 256
    while True:
        dark = vals[vals < t]
        if dark.size <= max_dark_fraction * n:
            return min(t, 255)
        nt = otsu_threshold(dark)
        if nt >= t or np.count_nonzero(dark < nt) in (0, dark.size):
            # A flat histogram has no dark class at all.
            return t if t <= 255 else 0
        t = nt


def inverse_binarize(frame, threshold: int) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must lie in [0, 255]")
    return as_frame(frame) < threshold


def morph_open(mask, kernel_radius: int) -> np.ndarray:
    """Erode then dilate with a (2r+1)x(2r+1) square."""
    mask = np.asarray(mask, dtype=bool)
    if kernel_radius < 0:
        raise ValueError("kernel_radius must be >= 0")
    if kernel_radius == 0:
        return mask.copy()
    size = 2 * kernel_radius + 1
    # Square elements are separable; min/max filters with a zero border are
    # binary erosion/dilation with pixels outside the frame counted as 0.
    m = mask.view(np.uint8)
    eroded = ndimage.minimum_filter(m, size=size, mode="constant", cval=0)
    return ndimage.maximum_filter(eroded, size=size, mode="constant", cval=0).astype(bool)


def largest_cc(mask) -> ConnectedComponent | None:
    """Largest 8-connected component; ties go to the one found first in raster order."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return None
    # scipy numbers components by the raster position of their first pixel.
    counts = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(counts)) + 1
    ys, xs = np.nonzero(labels == best)
    return ConnectedComponent(ys=ys, xs=xs, shape=mask.shape)


# Clockwise ring starting west (y grows downward).
_RING = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


def _trace_outer(mask: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbour trace of the outer boundary, closed (ends at start)."""
    h, w = mask.shape

    def fg(y, x):
        return 0 <= y < h and 0 <= x < w and mask[y, x]

    p = start
    back = 0  # west of the raster-first pixel is background
    path = [p]
    first_move = None
    for _ in range(4 * mask.size + 8):
        for k in range(1, 9):
            i = (back + k) % 8
            q = (p[0] + _RING[i][0], p[1] + _RING[i][1])
            if fg(*q):
                break
        else:
            return path  # isolated pixel
        prev = (p[0] + _RING[(i - 1) % 8][0], p[1] + _RING[(i - 1) % 8][1])
        move = (p, q)
        if first_move is None:
            first_move = move
        elif move == first_move:
            return path
        back = _RING_INDEX[(prev[0] - q[0], prev[1] - q[1])]
        path.append(q)
        p = q
    raise RuntimeError("boundary trace did not terminate")


def boundary_length(cc: ConnectedComponent) -> float:
    """Perimeter estimate: 8-chain length of the outer contour through pixel
    centres, plus pi for the half-pixel offset to the true edge.

    A single pixel is given perimeter 4.
    """
    if cc.area == 1:
        return 4.0
    y0, x0 = cc.ys.min(), cc.xs.min()
    local = np.zeros((cc.ys.max() - y0 + 1, cc.xs.max() - x0 + 1), dtype=bool)
    local[cc.ys - y0, cc.xs - x0] = True
    start = tuple(int(v) for v in np.argwhere(local)[0])
    path = np.asarray(_trace_outer(local, start))
    steps = np.abs(np.diff(path, axis=0)).sum(axis=1)
    length = float(np.sum(steps == 1) + math.sqrt(2) * np.sum(steps == 2))
    return length + math.pi


def roundness(cc: ConnectedComponent) -> float:
    """4*pi*area / perimeter**2; close to 1 for discs."""
    p = boundary_length(cc)
    return 4.0 * math.pi * cc.area / (p * p)


def is_pupil(cc: ConnectedComponent | None, min_roundness: float = 0.6, min_area: int = 100) -> bool:
    if cc is None or cc.area < min_area:
        return False
    return roundness(cc) >= min_roundness


def crop_around(center, window=(450, 200), frame_dims=(640, 400)) -> CropWindow:
    """Centre a ``window`` (w, h) on ``center`` (x, y), shifted minimally to fit ``frame_dims`` (W, H)."""
    w, h = window
    fw, fh = frame_dims
    if w > fw or h > fh:
        raise ValueError(f"window {w}x{h} larger than frame {fw}x{fh}")
    cx, cy = center
    x0 = math.floor(cx - w / 2 + 0.5)
    y0 = math.floor(cy - h / 2 + 0.5)
    x0 = min(max(x0, 0), fw - w)
    y0 = min(max(y0, 0), fh - h)
    return CropWindow(int(x0), int(y0), w, h)


# --- event-based reuse -----------------------------------------------------


class Decision(str, Enum):
    REUSE = "reuse"
    RECOMPUTE = "recompute"


def event_map(curr, prev, beta1: float) -> np.ndarray:
    curr = as_frame(curr)
    prev = as_frame(prev)
    if curr.shape != prev.shape:
        raise ValueError(f"frame dimensions differ: {curr.shape} vs {prev.shape}")
    c = curr.astype(np.float64)
    p = prev.astype(np.float64)
    return np.abs(c - p) / np.maximum(p, 1.0) > beta1


def event_decision(curr, prev, params: EventParams = EventParams()) -> Decision:
    active = int(np.count_nonzero(event_map(curr, prev, params.beta1)))
    return Decision.RECOMPUTE if active > params.beta2 else Decision.REUSE


# --- full pipeline ---------------------------------------------------------


def find_pupil(frame, config: CropperConfig = CropperConfig()) -> ConnectedComponent | None:
    frame = as_frame(frame)
    masked = border_mask(frame, config.margin)
    if config.threshold is None:
        m = config.margin
        interior = frame[m : frame.shape[0] - m, m : frame.shape[1] - m] if m else frame
        threshold = dark_class_threshold(interior, config.max_dark_fraction)
    else:
        threshold = config.threshold
    mask = morph_open(inverse_binarize(masked, threshold), config.kernel_radius)
    cc = largest_cc(mask)
    if not is_pupil(cc, config.min_roundness, config.min_area):
        return None
    return cc


def locate_and_crop(frame, config: CropperConfig = CropperConfig()) -> CropWindow | None:
    """Crop window centred on the detected pupil, or None when no pupil is found."""
    frame = as_frame(frame)
    cc = find_pupil(frame, config)
    if cc is None:
        return None
    h, w = frame.shape
    return crop_around(cc.centroid, config.window, (w, h))


class CropSession:
    """Streaming cropper that reuses the buffered result while the eye is still.

    The reference frame is only replaced on recompute, so slow drift keeps
    accumulating against it until it triggers an event.
    """

    def __init__(self, config: CropperConfig = CropperConfig(), params: EventParams = EventParams()):
        self.config = config
        self.params = params
        self.prev: np.ndarray | None = None
        self.window: CropWindow | None = None
        self.gaze = None

    def step(self, frame) -> tuple[Decision, CropWindow | None]:
        frame = as_frame(frame)
        if self.prev is not None and event_decision(frame, self.prev, self.params) is Decision.REUSE:
            return Decision.REUSE, self.window
        self.prev = frame.copy()
        window = locate_and_crop(frame, self.config)
        if window is not None:
            self.window = window
        return Decision.RECOMPUTE, window
