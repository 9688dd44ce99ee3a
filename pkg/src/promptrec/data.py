"""Geometry and dataset types, JSON-lines ingestion and the proposal area filter."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadGeometry, DuplicateId, MissingField, ValidationError

BOX_FORMATS = ("xywh", "xyxy")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, top-left origin, continuous pixel coordinates."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got {self}")

    @classmethod
    def from_list(cls, values: Sequence[float], box_format: str = "xywh") -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"box needs 4 numbers, got {values!r}")
        x, y, a, b = (float(v) for v in values)
        if box_format == "xyxy":
            return cls(x, y, a - x, b - y)
        return cls(x, y, a, b)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def to_list(self, box_format: str = "xywh") -> list[float]:
        if box_format == "xyxy":
            return [self.x, self.y, self.x2, self.y2]
        return [self.x, self.y, self.w, self.h]

    def clip(self, width: float, height: float) -> "BoundingBox | None":
        """Clip to ``[0, width] x [0, height]``; None when nothing is left."""
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x2, float(width)), min(self.y2, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def pixel_bounds(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Integer pixel span ``(x0, y0, x1, y1)``, end-exclusive, covering the box."""
        x0 = min(max(int(math.floor(self.x)), 0), width - 1)
        y0 = min(max(int(math.floor(self.y)), 0), height - 1)
        x1 = max(min(int(math.ceil(self.x2)), width), x0 + 1)
        y1 = max(min(int(math.ceil(self.y2)), height), y0 + 1)
        return x0, y0, x1, y1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Entry:
    entry_id: str
    descriptions: tuple[str, ...]
    gt_box: BoundingBox | None = None

    def __post_init__(self):
        if not self.descriptions:
            raise ValueError(f"entry {self.entry_id!r} has no descriptions")
        for d in self.descriptions:
            if not d.strip():
                raise ValueError(f"entry {self.entry_id!r} has a blank description")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    entries: tuple[Entry, ...]
    proposals: tuple[BoundingBox, ...]

    def entry(self, entry_id: str) -> Entry:
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise KeyError(entry_id)


@dataclass(frozen=True)
class Dataset:
    records: tuple[ImageRecord, ...]
    source_path: Path | None = None
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for r in self.records:
            if r.image_id in index:
                raise DuplicateId(r.image_id)
            index[r.image_id] = r
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def record(self, image_id: str) -> ImageRecord:
        return self._index[image_id]

    def image_path(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.source_path is not None:
            p = Path(self.source_path).parent / p
        return p


def filter_proposals(record: ImageRecord, min_area_frac: float) -> list[BoundingBox]:
    """Drop proposals smaller than ``min_area_frac`` of the image.

    Returns the unfiltered list when nothing would survive.
    """
    if not 0 <= min_area_frac < 1:
        raise ValueError(f"min_area_frac must be in [0, 1), got {min_area_frac}")
    limit = min_area_frac * record.width * record.height
    kept = [b for b in record.proposals if b.area >= limit]
    return kept if kept else list(record.proposals)


def filter_indices(record: ImageRecord, min_area_frac: float) -> list[int]:
    """Like :func:`filter_proposals` but returns positions into ``record.proposals``."""
    limit = min_area_frac * record.width * record.height
    kept = [i for i, b in enumerate(record.proposals) if b.area >= limit]
    return kept if kept else list(range(len(record.proposals)))


def _require(obj: dict, key: str, index: int):
    if key not in obj:
        raise MissingField(index, key)
    return obj[key]


def _parse_box(values, image_id: str, box_format: str) -> BoundingBox:
    try:
        x, y, a, b = (float(v) for v in values)
    except (TypeError, ValueError):
        raise BadGeometry(image_id, values) from None
    w, h = (a - x, b - y) if box_format == "xyxy" else (a, b)
    if not (w > 0 and h > 0) or not all(map(math.isfinite, (x, y, w, h))):
        raise BadGeometry(image_id, values)
    return BoundingBox(x, y, w, h)


def parse_record(obj: dict, index: int, box_format: str = "xywh") -> ImageRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"record {index}: expected an object")
    image_id = str(_require(obj, "image_id", index))
    path = str(_require(obj, "path", index))
    width = int(_require(obj, "width", index))
    height = int(_require(obj, "height", index))
    if width <= 0 or height <= 0:
        raise ValidationError(f"record {index}: image size must be positive")

    proposals = []
    for raw in _require(obj, "proposals", index):
        clipped = _parse_box(raw, image_id, box_format).clip(width, height)
        if clipped is None:
            raise BadGeometry(image_id, raw)
        proposals.append(clipped)

    entries = []
    seen = set()
    for e in _require(obj, "entries", index):
        entry_id = str(_require(e, "entry_id", index))
        if entry_id in seen:
            raise DuplicateId(f"{image_id}/{entry_id}")
        seen.add(entry_id)
        descs = _require(e, "descriptions", index)
        if not isinstance(descs, list) or not descs or not all(
            isinstance(d, str) and d.strip() for d in descs
        ):
            raise ValidationError(f"record {index}: entry {entry_id!r} needs non-blank descriptions")
        gt = e.get("gt_box")
        gt_box = _parse_box(gt, image_id, box_format) if gt is not None else None
        entries.append(Entry(entry_id, tuple(descs), gt_box))

    return ImageRecord(image_id, path, width, height, tuple(entries), tuple(proposals))


def load_dataset(path: str | Path, box_format: str = "xywh") -> Dataset:
    if box_format not in BOX_FORMATS:
        raise ValidationError(f"unknown box format {box_format!r}")
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno + 1}: {exc}") from None
            records.append(parse_record(obj, len(records), box_format))
    return Dataset(tuple(records), path)


def record_to_dict(record: ImageRecord, box_format: str = "xywh") -> dict:
    return {
        "image_id": record.image_id,
        "path": record.path,
        "width": record.width,
        "height": record.height,
        "proposals": [b.to_list(box_format) for b in record.proposals],
        "entries": [
            {
                "entry_id": e.entry_id,
                "descriptions": list(e.descriptions),
                "gt_box": e.gt_box.to_list(box_format) if e.gt_box else None,
            }
            for e in record.entries
        ],
    }


def dump_dataset(records: Iterable[ImageRecord], path: str | Path, box_format: str = "xywh") -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r, box_format)) + "\n")


def load_image(dataset: Dataset, record: ImageRecord) -> np.ndarray:
    """Read the record's image as an ``(H, W, 3)`` uint8 RGB array."""
    from PIL import Image

    with Image.open(dataset.image_path(record)) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if pixels.shape[:2] != (record.height, record.width):
        raise ValidationError(
            f"image {record.image_id!r} is {pixels.shape[1]}x{pixels.shape[0]}, "
            f"record says {record.width}x{record.height}"
        )
    return pixels


def image_digest(pixels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr(pixels.shape).encode())
    h.update(np.ascontiguousarray(pixels).tobytes())
    return h.hexdigest()
