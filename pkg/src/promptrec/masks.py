"""Binary object masks inside proposal boxes, with a disk cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BoundingBox, image_digest
from .errors import BackendUnavailable, ValidationError

log = logging.getLogger(__name__)

CACHE_ENV = "PROMPTREC_CACHE_DIR"
_MAGIC = b"PRMASK1\n"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise ValueError(f"bits shape {bits.shape} != {(self.height, self.width)}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        return (
            isinstance(other, BinaryMask)
            and (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.bits, other.bits)
        )

    __hash__ = None

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def from_box(cls, box: BoundingBox, width: int, height: int) -> "BinaryMask":
        bits = np.zeros((height, width), dtype=bool)
        x0, y0, x1, y1 = box.pixel_bounds(width, height)
        bits[y0:y1, x0:x1] = True
        return cls(width, height, bits)

    def to_runs(self) -> np.ndarray:
        """Run lengths over the row-major bit string, starting with a run of zeros."""
        flat = self.bits.ravel()
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        edges = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(edges)
        if flat.size and flat[0]:
            runs = np.concatenate(([0], runs))
        return runs.astype(np.uint32)

    @classmethod
    def from_runs(cls, width: int, height: int, runs: np.ndarray) -> "BinaryMask":
        values = np.arange(len(runs)) % 2 == 1
        flat = np.repeat(values, runs.astype(np.int64))
        if flat.size != width * height:
            raise ValueError("run lengths do not cover the mask")
        return cls(width, height, flat.reshape(height, width))


def write_mask(path: Path, mask: BinaryMask, backend: str) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    header = json.dumps({"width": mask.width, "height": mask.height, "backend": backend}).encode()
    runs = mask.to_runs().astype("<u4")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".rle")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(header + b"\n")
            fh.write(runs.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_mask(path: Path) -> tuple[BinaryMask, str]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValidationError(f"{path}: not a mask file")
    rest = data[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    runs = np.frombuffer(rest[nl + 1:], dtype="<u4")
    return BinaryMask.from_runs(header["width"], header["height"], runs), header["backend"]


class MaskBackend:
    """Segmenter interface.

    ``predict`` returns candidate ``(bits, confidence)`` pairs for the object
    in ``box``; bits are ``(H, W)`` bool arrays over the full image.
    """

    name = "base"
    version = "0"

    def predict(self, image: np.ndarray, box: BoundingBox) -> list[tuple[np.ndarray, float]]:
        raise NotImplementedError

    @property
    def key(self) -> str:
        return f"{self.name}@{self.version}"


class BoxFillBackend(MaskBackend):
    name = "boxfill"
    version = "1"

    def predict(self, image, box):
        h, w = image.shape[:2]
        return [(BinaryMask.from_box(box, w, h).bits, 1.0)]


class SamBackend(MaskBackend):
    """Box-prompted Segment Anything predictor.

    Needs the ``segment_anything`` package and a checkpoint path, given
    directly or through ``PROMPTREC_SAM_CHECKPOINT``.
    """

    name = "sam"

    def __init__(self, checkpoint: str | None = None, model_type: str = "vit_h", device: str | None = None):
        checkpoint = checkpoint or os.environ.get("PROMPTREC_SAM_CHECKPOINT")
        try:
            import torch
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise BackendUnavailable(self.name, str(exc)) from exc
        if not checkpoint or not Path(checkpoint).is_file():
            raise BackendUnavailable(self.name, f"checkpoint not found: {checkpoint}")
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        model = sam_model_registry[model_type](checkpoint=checkpoint).to(device=device)
        model.eval()
        self._predictor = SamPredictor(model)
        self._current = None
        self.version = f"{model_type}:{Path(checkpoint).name}"

    def predict(self, image, box):
        digest = image_digest(image)
        if self._current != digest:
            self._predictor.set_image(image)
            self._current = digest
        xyxy = np.array(box.to_list("xyxy"), dtype=np.float32)
        masks, scores, _ = self._predictor.predict(box=xyxy, multimask_output=True)
        return [(m.astype(bool), float(s)) for m, s in zip(masks, scores)]


def make_mask_backend(name: str, **kwargs) -> MaskBackend:
    if name == "boxfill":
        return BoxFillBackend()
    if name == "sam":
        return SamBackend(**kwargs)
    raise BackendUnavailable(name, "unknown mask backend")


class MaskCache:
    """One RLE file per (image content, box, backend) key."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None
        self.hits = 0
        self.misses = 0

    @classmethod
    def from_env(cls, default: str | Path | None = None) -> "MaskCache":
        return cls(os.environ.get(CACHE_ENV) or default)

    @staticmethod
    def key(digest: str, box: BoundingBox, backend: MaskBackend) -> str:
        raw = json.dumps([digest, box.to_list(), backend.key])
        return hashlib.sha256(raw.encode()).hexdigest()

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.rle"

    def get(self, key: str) -> BinaryMask | None:
        if self.root is None:
            return None
        p = self.path(key)
        if not p.exists():
            return None
        return read_mask(p)[0]

    def put(self, key: str, mask: BinaryMask, backend: MaskBackend) -> None:
        if self.root is not None:
            write_mask(self.path(key), mask, backend.key)


def _select(candidates: list[tuple[np.ndarray, float]]) -> np.ndarray | None:
    best = None
    best_rank = None
    for bits, score in candidates:
        rank = (float(score), int(np.count_nonzero(bits)))
        if best_rank is None or rank > best_rank:
            best, best_rank = bits, rank
    return best


def segment(
    image: np.ndarray,
    box: BoundingBox,
    backend: MaskBackend,
    cache: MaskCache | None = None,
    digest: str | None = None,
) -> BinaryMask:
    """Mask of the object in ``box``, clamped to the box.

    The most confident candidate wins, larger area breaking ties. An empty
    result falls back to filling the box.
    """
    h, w = image.shape[:2]
    key = None
    if cache is not None and cache.root is not None:
        key = MaskCache.key(digest or image_digest(image), box, backend)
        cached = cache.get(key)
        if cached is not None:
            cache.hits += 1
            return cached
        cache.misses += 1

    x0, y0, x1, y1 = box.pixel_bounds(w, h)
    inside = np.zeros((h, w), dtype=bool)
    inside[y0:y1, x0:x1] = True

    candidates = backend.predict(image, box)
    for bits, _ in candidates:
        if np.shape(bits) != (h, w):
            raise ValueError(f"mask backend {backend.name!r} returned shape {np.shape(bits)}, expected {(h, w)}")
    chosen = _select(candidates)
    bits = np.zeros((h, w), dtype=bool) if chosen is None else np.asarray(chosen, dtype=bool) & inside
    if not bits.any():
        log.warning("empty mask from %s for box %s; using box fill", backend.name, box.to_list())
        bits = inside
    mask = BinaryMask(w, h, bits)
    if key is not None:
        cache.put(key, mask, backend)
    return mask
