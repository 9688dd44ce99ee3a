"""Visual prompt rendering for one proposal.

Coordinates are continuous with the pixel ``(row i, col j)`` covering
``[j, j+1) x [i, i+1)``; strokes colour every pixel whose centre lies within
``thickness / 2`` of the stroked path. No anti-aliasing, so output is
bit-exact across runs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import BoundingBox
from .errors import MaskRequired
from .masks import BinaryMask

# Path sample spacing; dyadic so samples at half-integers are exact.
_STEP = 1.0 / 8.0

Color = tuple[int, int, int]


class PromptKind(str, enum.Enum):
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"
    C4 = "C4"
    F1 = "F1"
    F2 = "F2"
    F3 = "F3"

    @property
    def fine(self) -> bool:
        return self.value.startswith("F")

    @property
    def granularity(self) -> str:
        return "fine" if self.fine else "coarse"

    def __str__(self) -> str:
        return self.value


DEFAULT_KINDS = (PromptKind.C1, PromptKind.C3, PromptKind.C4, PromptKind.F1, PromptKind.F2, PromptKind.F3)

DEFAULT_BINDINGS: dict[str, str] = {
    "C1": "crop_pad",
    "C2": "box_outline",
    "C3": "ellipse",
    "C4": "blur_outside_box",
    "F1": "mask_contour",
    "F2": "blur_outside_mask",
    "F3": "gray_outside_mask",
}


def parse_kinds(spec) -> list[PromptKind]:
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    return [PromptKind(s.strip().upper()) if isinstance(s, str) else PromptKind(s) for s in spec]


def _check_color(c) -> Color:
    c = tuple(int(v) for v in c)
    if len(c) != 3 or not all(0 <= v <= 255 for v in c):
        raise ValueError(f"bad colour {c!r}")
    return c


@dataclass(frozen=True)
class RenderParams:
    circle_thickness: int = 6
    contour_thickness: int = 2
    pad_gray: Color = (100, 100, 100)
    blur_sigma: float = 100.0
    circle_color: Color = (255, 0, 0)
    box_color: Color = (255, 0, 0)

    def __post_init__(self):
        if self.circle_thickness < 1 or self.contour_thickness < 1:
            raise ValueError("stroke thickness must be >= 1")
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")
        for name in ("pad_gray", "circle_color", "box_color"):
            object.__setattr__(self, name, _check_color(getattr(self, name)))


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Whole-image blur, kernel truncated at 3 sigma, mirrored borders."""
    out = ndimage.gaussian_filter(
        image.astype(np.float64), sigma=(sigma, sigma, 0), truncate=3.0, mode="mirror"
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- path sampling ---------------------------------------------------------


def _segment_samples(p0, p1) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.abs(p1 - p0).max() / _STEP)), 1)
    t = np.arange(n + 1) / n
    return p0 + t[:, None] * (p1 - p0)


def rectangle_path(box: BoundingBox) -> np.ndarray:
    corners = [(box.x, box.y), (box.x2, box.y), (box.x2, box.y2), (box.x, box.y2), (box.x, box.y)]
    return np.concatenate([_segment_samples(a, b) for a, b in zip(corners, corners[1:])])


def ellipse_path(box: BoundingBox) -> np.ndarray:
    """Samples of the ellipse inscribed in ``box``."""
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    a, b = box.w / 2, box.h / 2
    n = max(int(math.ceil(2 * math.pi * max(a, b) / _STEP)), 16)
    n += (-n) % 4  # keep the four axis extremes on the sample grid
    theta = 2 * math.pi * np.arange(n) / n
    return np.stack([cx + a * np.cos(theta), cy + b * np.sin(theta)], axis=1)


def contour_path(mask: BinaryMask) -> np.ndarray:
    """Samples along the outer boundary of the mask's pixel squares (holes ignored)."""
    filled = ndimage.binary_fill_holes(mask.bits)
    padded = np.pad(filled, 1)
    # vertical boundary segments: x = j, from y = i to i + 1
    vi, vj = np.nonzero(padded[1:-1, 1:] != padded[1:-1, :-1])
    # horizontal boundary segments: y = i, from x = j to j + 1
    hi, hj = np.nonzero(padded[1:, 1:-1] != padded[:-1, 1:-1])
    t = np.arange(int(1 / _STEP) + 1) * _STEP
    vert = np.stack(
        [np.repeat(vj, t.size).astype(float), (vi[:, None] + t[None, :]).ravel()], axis=1
    )
    horiz = np.stack(
        [(hj[:, None] + t[None, :]).ravel(), np.repeat(hi, t.size).astype(float)], axis=1
    )
    pts = np.concatenate([vert, horiz])
    return np.unique(pts, axis=0) if len(pts) else pts.reshape(0, 2)


def stroke_mask(path: np.ndarray, thickness: float, width: int, height: int) -> np.ndarray:
    """Pixels whose centre is within ``thickness / 2`` of any path sample."""
    out = np.zeros((height, width), dtype=bool)
    if len(path) == 0:
        return out
    r = thickness / 2.0
    lo = np.floor(path.min(axis=0) - r - 1).astype(int)
    hi = np.ceil(path.max(axis=0) + r + 1).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], width), min(hi[1], height)
    if x1 <= x0 or y1 <= y0:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    centres = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    dist, _ = cKDTree(path).query(centres, distance_upper_bound=r + 1e-9)
    out[y0:y1, x0:x1] = (dist <= r + 1e-9).reshape(ys.shape)
    return out


# -- per-kind operations ---------------------------------------------------


def _crop_pad(image, box, mask, params, blurred):
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box.pixel_bounds(w, h)
    crop = image[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    out = np.empty((side, side, 3), dtype=np.uint8)
    out[:] = params.pad_gray
    top, left = (side - ch) // 2, (side - cw) // 2
    out[top:top + ch, left:left + cw] = crop
    return out


def _paint(image, bits, color):
    out = image.copy()
    out[bits] = color
    return out


def _box_outline(image, box, mask, params, blurred):
    h, w = image.shape[:2]
    return _paint(image, stroke_mask(rectangle_path(box), params.contour_thickness, w, h), params.box_color)


def _ellipse(image, box, mask, params, blurred):
    h, w = image.shape[:2]
    return _paint(image, stroke_mask(ellipse_path(box), params.circle_thickness, w, h), params.circle_color)


def _mask_contour(image, box, mask, params, blurred):
    h, w = image.shape[:2]
    return _paint(image, stroke_mask(contour_path(mask), params.contour_thickness, w, h), params.circle_color)


def _box_region(image, box):
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box.pixel_bounds(w, h)
    inside = np.zeros((h, w), dtype=bool)
    inside[y0:y1, x0:x1] = True
    return inside


def _blur_outside_box(image, box, mask, params, blurred):
    out = blurred().copy()
    inside = _box_region(image, box)
    out[inside] = image[inside]
    return out


def _blur_outside_mask(image, box, mask, params, blurred):
    out = blurred().copy()
    out[mask.bits] = image[mask.bits]
    return out


def _gray_outside_mask(image, box, mask, params, blurred):
    out = np.empty_like(image)
    out[:] = params.pad_gray
    out[mask.bits] = image[mask.bits]
    return out


OPERATIONS: dict[str, tuple[Callable, bool]] = {
    "crop_pad": (_crop_pad, False),
    "box_outline": (_box_outline, False),
    "ellipse": (_ellipse, False),
    "blur_outside_box": (_blur_outside_box, False),
    "mask_contour": (_mask_contour, True),
    "blur_outside_mask": (_blur_outside_mask, True),
    "gray_outside_mask": (_gray_outside_mask, True),
}


class Renderer:
    """Renders prompts for one image, blurring it at most once."""

    def __init__(self, image: np.ndarray, params: RenderParams | None = None,
                 bindings: Mapping[str, str] | None = None):
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError("expected an (H, W, 3) uint8 image")
        self.image = image
        self.params = params or RenderParams()
        self.bindings = dict(DEFAULT_BINDINGS, **(bindings or {}))
        self._blurred = None

    def blurred(self) -> np.ndarray:
        if self._blurred is None:
            self._blurred = gaussian_blur(self.image, self.params.blur_sigma)
        return self._blurred

    def render(self, box: BoundingBox, kind: PromptKind, mask: BinaryMask | None = None) -> np.ndarray:
        kind = PromptKind(kind)
        op, uses_mask = OPERATIONS[self.bindings[kind.value]]
        if kind.fine and mask is None:
            raise MaskRequired(kind)
        if uses_mask and not kind.fine:
            raise ValueError(f"coarse kind {kind} is bound to mask operation {self.bindings[kind.value]!r}")
        if uses_mask:
            h, w = self.image.shape[:2]
            if (mask.height, mask.width) != (h, w):
                raise ValueError("mask size does not match the image")
        return op(self.image, box, mask if uses_mask else None, self.params, self.blurred)


def render(image: np.ndarray, box: BoundingBox, mask: BinaryMask | None, kind: PromptKind,
           params: RenderParams | None = None) -> np.ndarray:
    return Renderer(image, params).render(box, kind, mask)
