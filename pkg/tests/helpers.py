"""Synthetic corpora and independent oracles shared by the test modules."""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import optimize

from promptrec.data import BoundingBox, Entry, ImageRecord, dump_dataset, load_dataset

# Collision pattern: both entries prefer proposal 0 on their own, but the
# best pairing sends entry "a" to proposal 1 and entry "b" to proposal 0.
COLLISION_SCORES = {"a": [0.9, 0.8, 0.0], "b": [0.85, 0.1, 0.0]}
COLLISION_GT = {"a": 1, "b": 0}


def noise_image(width: int, height: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def save_image(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(pixels).save(path)


def collision_corpus(root: Path, n_images: int = 50, size: int = 48, descriptions: int = 2):
    """Write images, dataset and planted-score sidecar; returns (dataset path, sidecar path)."""
    root.mkdir(parents=True, exist_ok=True)
    half = size // 2
    proposals = (
        BoundingBox(0, 0, half, half),
        BoundingBox(half, half, half, half),
        BoundingBox(0, half, half, half),
    )
    records, planted = [], []
    for n in range(n_images):
        image_id = f"img{n:03d}"
        save_image(noise_image(size, size, n), root / f"{image_id}.png")
        entries = []
        for entry_id in ("a", "b"):
            descs = tuple(f"A photo of object {entry_id} number {k}." for k in range(descriptions))
            entries.append(Entry(entry_id, descs, proposals[COLLISION_GT[entry_id]]))
            planted.append({"image_id": image_id, "entry_id": entry_id, "scores": COLLISION_SCORES[entry_id]})
        records.append(ImageRecord(image_id, f"{image_id}.png", size, size, tuple(entries), proposals))
    dataset_path = root / "dataset.jsonl"
    dump_dataset(records, dataset_path)
    sidecar = root / "planted.jsonl"
    sidecar.write_text("".join(json.dumps(p) + "\n" for p in planted), encoding="utf-8")
    return dataset_path, sidecar


def load_corpus(root: Path, **kwargs):
    dataset_path, sidecar = collision_corpus(root, **kwargs)
    return load_dataset(dataset_path), sidecar


def pixel_iou(a: BoundingBox, b: BoundingBox, grid: int) -> float:
    """IoU by counting unit cells of an integer grid."""
    ys, xs = np.mgrid[0:grid, 0:grid]

    def cells(box):
        return (xs >= box.x) & (xs < box.x2) & (ys >= box.y) & (ys < box.y2)

    ca, cb = cells(a), cells(b)
    union = np.count_nonzero(ca | cb)
    return np.count_nonzero(ca & cb) / union if union else 0.0


def brute_force_max(weights: np.ndarray) -> float:
    """Best total over all injective maps of size min(rows, cols), summed in row order."""
    m, n = weights.shape
    best = -np.inf
    if m <= n:
        for cols in itertools.permutations(range(n), m):
            total = 0.0
            for i, j in enumerate(cols):
                total += weights[i, j]
            best = max(best, total)
    else:
        for rows in itertools.permutations(range(m), n):
            total = 0.0
            for i, j in sorted((r, j) for j, r in enumerate(rows)):
                total += weights[i, j]
            best = max(best, total)
    return best


def ellipse_distance(px: float, py: float, box: BoundingBox) -> float:
    """Exact distance from a point to the ellipse inscribed in ``box``."""
    cx, cy, a, b = box.x + box.w / 2, box.y + box.h / 2, box.w / 2, box.h / 2

    def d2(t):
        return (cx + a * np.cos(t) - px) ** 2 + (cy + b * np.sin(t) - py) ** 2

    grid = np.linspace(0, 2 * np.pi, 721)
    t0 = grid[np.argmin(d2(grid))]
    res = optimize.minimize_scalar(d2, bounds=(t0 - 0.01, t0 + 0.01), method="bounded",
                                   options={"xatol": 1e-12})
    return float(np.sqrt(min(res.fun, d2(t0))))


def run_lengths(line: np.ndarray) -> list[int]:
    """Lengths of the runs of True values in a 1-D bool array."""
    runs, n = [], 0
    for v in line:
        if v:
            n += 1
        elif n:
            runs.append(n)
            n = 0
    if n:
        runs.append(n)
    return runs
