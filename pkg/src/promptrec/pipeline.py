"""End-to-end runner, accuracy evaluation and the cumulative ablation ladder."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


from .config import PipelineConfig
from .data import BoundingBox, Dataset, ImageRecord, filter_indices, image_digest, iou, load_image
from .errors import BackendUnavailable, MissingGroundTruth, PromptRecError, ValidationError
from .joint import aggregate_entry, assign_image
from .masks import MaskBackend, MaskCache, make_mask_backend, segment
from .prompts import PromptKind, Renderer, RenderParams
from .scoring import EntryTexts, ScorerBackend, fuse, make_backend, score_image
from .text import prepare

log = logging.getLogger(__name__)

PREDICTIONS_FILE = "predictions.jsonl"
REPORT_FILE = "report.json"

ABLATION_LABELS = (
    "baseline",
    "+visual prompt",
    "+removing redundant",
    "+parameter tuning",
    "+joint prediction",
)

# Untuned settings used by the ladder before the "+parameter tuning" row.
NAIVE_RENDER = RenderParams(circle_thickness=1, contour_thickness=1, pad_gray=(0, 0, 0), blur_sigma=1.0)
NAIVE_MIN_AREA_FRAC = 0.0
NAIVE_TEMPERATURE = 1.0


@dataclass(frozen=True)
class Prediction:
    image_id: str
    entry_id: str
    description_index: int
    box: BoundingBox
    score: float
    flag: str  # joint | argmax | fallback
    proposal_index: int = -1

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "entry_id": self.entry_id,
            "description_index": self.description_index,
            "box": self.box.to_list(),
            "score": self.score,
            "flag": self.flag,
            "proposal_index": self.proposal_index,
        })

    @classmethod
    def from_dict(cls, obj: dict) -> "Prediction":
        return cls(
            str(obj["image_id"]),
            str(obj["entry_id"]),
            int(obj["description_index"]),
            BoundingBox.from_list(obj["box"]),
            float(obj["score"]),
            str(obj["flag"]),
            int(obj.get("proposal_index", -1)),
        )


def write_predictions(predictions: Iterable[Prediction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            fh.write(p.to_json() + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Prediction.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad prediction ({exc})") from None
    return out


@dataclass
class RunReport:
    predictions: list[Prediction]
    accuracy: float | None
    counts: dict[str, int]
    wall_time: float
    config: dict
    config_hash: str
    skipped_images: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        return d


def evaluate_accuracy(predictions: Sequence[Prediction], dataset: Dataset, iou_threshold: float = 0.5) -> float:
    """Fraction of descriptions whose predicted box reaches ``iou_threshold`` (inclusive)."""
    if not 0 < iou_threshold <= 1:
        raise ValidationError("iou threshold must be in (0, 1]")
    if not predictions:
        raise ValidationError("no predictions to evaluate")
    correct = 0
    for p in predictions:
        try:
            entry = dataset.record(p.image_id).entry(p.entry_id)
        except KeyError:
            raise ValidationError(f"prediction for unknown entry {p.image_id}/{p.entry_id}") from None
        if entry.gt_box is None:
            raise MissingGroundTruth(p.entry_id)
        if iou(p.box, entry.gt_box) >= iou_threshold:
            correct += 1
    return correct / len(predictions)


def build_backends(config: PipelineConfig) -> list[ScorerBackend]:
    return [
        make_backend(name, mock_answers=config.mock_answers, mock_noise=config.mock_noise,
                     batch_size=config.batch_size)
        for name in config.backends
    ]


def build_mask_backend(config: PipelineConfig) -> MaskBackend:
    if config.mask_backend == "sam":
        return make_mask_backend("sam", checkpoint=config.sam_checkpoint)
    return make_mask_backend(config.mask_backend)


def predict_image(
    dataset: Dataset,
    record: ImageRecord,
    config: PipelineConfig,
    backends: Sequence[ScorerBackend],
    mask_backend: MaskBackend | None,
    cache: MaskCache | None = None,
) -> list[Prediction]:
    if not record.entries:
        return []
    positions = filter_indices(record, config.min_area_frac)
    if not positions:
        raise ValidationError(f"image {record.image_id!r} has no proposals")
    boxes = [record.proposals[i] for i in positions]
    image = load_image(dataset, record)

    rules = config.text_rules if config.reduce_text else None
    groups = [
        EntryTexts(e.entry_id, [prepare(d, rules, config.template or None) for d in e.descriptions])
        for e in record.entries
    ]

    digest = None
    masks: dict[int, object] = {}

    def get_mask(p: int):
        nonlocal digest
        if p not in masks:
            if mask_backend is None:
                raise ValidationError("fine prompt kinds need a mask backend")
            if digest is None:
                digest = image_digest(image)
            masks[p] = segment(image, boxes[p], mask_backend, cache, digest)
        return masks[p]

    tensors = score_image(
        image, boxes, groups, config.kinds, backends,
        masks=get_mask, proposal_ids=positions, image_id=record.image_id,
        batch_size=config.batch_size, renderer=Renderer(image, config.render, config.bindings),
    )
    vectors = [
        aggregate_entry(fuse(t, config.temperature, config.fusion, config.backend_weights),
                        e.entry_id, config.aggregate)
        for t, e in zip(tensors, record.entries)
    ]
    assignment = assign_image(vectors, config.joint_enabled, config.assign_weight)

    out = []
    for e, vec in zip(record.entries, vectors):
        pos = assignment.pairs[e.entry_id]
        for d in range(len(e.descriptions)):
            out.append(Prediction(record.image_id, e.entry_id, d, boxes[pos], float(vec.scores[pos]),
                                  assignment.methods[e.entry_id], positions[pos]))
    return out


def run_pipeline(
    dataset: Dataset,
    config: PipelineConfig,
    out_dir: str | Path | None = None,
    *,
    backends: Sequence[ScorerBackend] | None = None,
    mask_backend: MaskBackend | None = None,
    cache: MaskCache | None = None,
) -> RunReport:
    """Predict a box for every description; optionally write predictions and report to ``out_dir``."""
    config.validate()
    start = time.perf_counter()
    backends = list(backends) if backends is not None else build_backends(config)
    needs_masks = any(PromptKind(k).fine for k in config.kinds)
    if mask_backend is None and needs_masks:
        mask_backend = build_mask_backend(config)
    if cache is None:
        cache = MaskCache.from_env(config.cache_dir)

    def work(record: ImageRecord):
        try:
            return predict_image(dataset, record, config, backends, mask_backend, cache)
        except BackendUnavailable:
            raise
        except (PromptRecError, OSError) as exc:
            if config.skip_bad_images:
                log.warning("skipping image %s: %s", record.image_id, exc)
                return None
            raise

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, dataset.records))
    else:
        results = [work(r) for r in dataset.records]

    predictions: list[Prediction] = []
    skipped = []
    for record, res in zip(dataset.records, results):
        if res is None:
            skipped.append(record.image_id)
        else:
            predictions.extend(res)

    has_gt = bool(predictions) and all(
        dataset.record(p.image_id).entry(p.entry_id).gt_box is not None for p in predictions
    )
    accuracy = evaluate_accuracy(predictions, dataset, config.iou_threshold) if has_gt else None
    counts = {
        "images": len(dataset) - len(skipped),
        "entries": len({(p.image_id, p.entry_id) for p in predictions}),
        "descriptions": len(predictions),
        "fallbacks": len({(p.image_id, p.entry_id) for p in predictions if p.flag == "fallback"}),
        "skipped_images": len(skipped),
    }
    report = RunReport(predictions, accuracy, counts, time.perf_counter() - start,
                       config.snapshot(), config.digest(), skipped)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(predictions, out / PREDICTIONS_FILE)
        (out / REPORT_FILE).write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return report


def ladder_configs(config: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    """The five cumulative configurations, each adding one stage to the previous."""
    row1 = config.replace(
        kinds=(PromptKind.C1,), reduce_text=False, template=config.ablation_template,
        render=NAIVE_RENDER, min_area_frac=NAIVE_MIN_AREA_FRAC, temperature=NAIVE_TEMPERATURE,
        backend_weights=None, joint_enabled=False,
    )
    row2 = row1.replace(kinds=config.kinds)
    row3 = row2.replace(reduce_text=True, template="")
    row4 = row3.replace(render=config.render, min_area_frac=config.min_area_frac,
                        temperature=config.temperature, backend_weights=config.backend_weights)
    row5 = row4.replace(joint_enabled=True)
    return list(zip(ABLATION_LABELS, (row1, row2, row3, row4, row5)))


def ablate(
    dataset: Dataset,
    config: PipelineConfig,
    *,
    backends: Sequence[ScorerBackend] | None = None,
    mask_backend: MaskBackend | None = None,
) -> list[tuple[str, float]]:
    backends = list(backends) if backends is not None else build_backends(config)
    if mask_backend is None and any(k.fine for k in config.kinds):
        mask_backend = build_mask_backend(config)
    cache = MaskCache.from_env(config.cache_dir)
    rows = []
    for label, cfg in ladder_configs(config):
        report = run_pipeline(dataset, cfg, backends=backends, mask_backend=mask_backend, cache=cache)
        if report.accuracy is None:
            raise MissingGroundTruth("<dataset has no ground truth>")
        rows.append((label, report.accuracy))
    return rows


def format_table(rows: Sequence[tuple[str, float]]) -> str:
    width = max(len("Method"), *(len(label) for label, _ in rows))
    lines = [f"{'#':<3}{'Method':<{width}}  {'ACC':>7}"]
    for i, (label, acc) in enumerate(rows, 1):
        lines.append(f"{i:<3}{label:<{width}}  {100 * acc:7.3f}")
    return "\n".join(lines)
