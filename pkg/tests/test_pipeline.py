import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import COLLISION_GT, collision_corpus, load_corpus, save_image, noise_image
from promptrec.config import PipelineConfig
from promptrec.data import BoundingBox, Dataset, Entry, ImageRecord, iou, load_dataset
from promptrec.errors import ConfigError, MissingGroundTruth, RenderFailure, ValidationError
from promptrec.pipeline import (
    ABLATION_LABELS,
    Prediction,
    ablate,
    evaluate_accuracy,
    format_table,
    ladder_configs,
    read_predictions,
    run_pipeline,
    write_predictions,
)
from promptrec.prompts import PromptKind
from promptrec.scoring import softmax


def mock_config(sidecar, **changes):
    return PipelineConfig(backends=("mock",), mock_answers=str(sidecar)).replace(**changes)


def test_joint_corpus_accuracy(corpus):
    dataset, sidecar = corpus
    joint = run_pipeline(dataset, mock_config(sidecar))
    independent = run_pipeline(dataset, mock_config(sidecar, joint_enabled=False))
    assert joint.accuracy == 1.0
    assert independent.accuracy == 0.5
    assert {p.flag for p in joint.predictions} == {"joint"}
    assert {p.flag for p in independent.predictions} == {"argmax"}


def test_predictions_cover_every_description(corpus):
    dataset, sidecar = corpus
    report = run_pipeline(dataset, mock_config(sidecar))
    assert report.counts == {"images": 6, "entries": 12, "descriptions": 24, "fallbacks": 0,
                             "skipped_images": 0}
    by_entry = {}
    for p in report.predictions:
        by_entry.setdefault((p.image_id, p.entry_id), set()).add(p.box)
    assert all(len(boxes) == 1 for boxes in by_entry.values())


def test_output_files_and_determinism(corpus, tmp_path):
    dataset, sidecar = corpus
    cfg = mock_config(sidecar)
    run_pipeline(dataset, cfg, tmp_path / "a")
    run_pipeline(dataset, cfg.replace(workers=3), tmp_path / "b")
    first = (tmp_path / "a" / "predictions.jsonl").read_bytes()
    assert first == (tmp_path / "b" / "predictions.jsonl").read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["accuracy"] == 1.0 and report["config_hash"] == cfg.digest()
    line = json.loads(first.splitlines()[0])
    assert set(line) == {"image_id", "entry_id", "description_index", "box", "score", "flag", "proposal_index"}


def test_predictions_round_trip(corpus, tmp_path):
    dataset, sidecar = corpus
    preds = run_pipeline(dataset, mock_config(sidecar)).predictions
    write_predictions(preds, tmp_path / "p.jsonl")
    assert read_predictions(tmp_path / "p.jsonl") == preds
    (tmp_path / "bad.jsonl").write_text('{"image_id": "x"}\n')
    with pytest.raises(ValidationError):
        read_predictions(tmp_path / "bad.jsonl")


def test_empty_kinds_rejected_before_work(corpus):
    dataset, sidecar = corpus
    with pytest.raises(ConfigError):
        mock_config(sidecar, kinds=())


def test_area_filter_applied(tmp_path):
    save_image(noise_image(100, 100, 0), tmp_path / "i.png")
    tiny, big = BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 40, 40)
    record = ImageRecord("i", "i.png", 100, 100, (Entry("e", ("x",), tiny),), (tiny, big))
    ds = Dataset((record,), tmp_path / "d.jsonl")
    sidecar = tmp_path / "p.jsonl"
    sidecar.write_text('{"image_id": "i", "entry_id": "e", "proposal": 0}\n')
    filtered = run_pipeline(ds, mock_config(sidecar, kinds=(PromptKind.C1,)))
    assert filtered.predictions[0].box == big and filtered.predictions[0].proposal_index == 1
    unfiltered = run_pipeline(ds, mock_config(sidecar, kinds=(PromptKind.C1,), min_area_frac=0.0))
    assert unfiltered.predictions[0].box == tiny and unfiltered.accuracy == 1.0


def test_more_entries_than_proposals(tmp_path):
    save_image(noise_image(20, 20, 0), tmp_path / "i.png")
    boxes = (BoundingBox(0, 0, 10, 20), BoundingBox(10, 0, 10, 20))
    entries = tuple(Entry(e, ("x",), boxes[0]) for e in ("a", "b", "c"))
    ds = Dataset((ImageRecord("i", "i.png", 20, 20, entries, boxes),), tmp_path / "d.jsonl")
    sidecar = tmp_path / "p.jsonl"
    sidecar.write_text("".join(
        json.dumps({"image_id": "i", "entry_id": e, "scores": s}) + "\n"
        for e, s in (("a", [0.9, 0.1]), ("b", [0.8, 0.7]), ("c", [0.2, 0.6]))
    ))
    report = run_pipeline(ds, mock_config(sidecar, temperature=1.0))
    probs = {e: softmax(np.array(s), 1.0) for e, s in (("a", [0.9, 0.1]), ("b", [0.8, 0.7]), ("c", [0.2, 0.6]))}
    # brute force over which entry is left without a proposal
    best = max(
        (probs[x][i] + probs[y][1 - i], z)
        for x, y, z in (("a", "b", "c"), ("a", "c", "b"), ("b", "c", "a"))
        for i in (0, 1)
    )
    left_out = best[1]
    flags = {p.entry_id: p.flag for p in report.predictions}
    assert flags == {e: ("fallback" if e == left_out else "joint") for e in "abc"}
    assert left_out == "b"
    assert report.counts["fallbacks"] == 1


def test_missing_image_fails_fast_or_skips(corpus, tmp_path):
    dataset, sidecar = corpus
    broken = dataset.records[0].__class__(**{**dataset.records[0].__dict__, "path": "missing.png"})
    ds = Dataset((broken,) + dataset.records[1:], dataset.source_path)
    with pytest.raises(OSError):
        run_pipeline(ds, mock_config(sidecar))
    report = run_pipeline(ds, mock_config(sidecar, skip_bad_images=True))
    assert report.skipped_images == [broken.image_id] and report.counts["images"] == 5


def test_render_failure_aborts(corpus):
    from promptrec.masks import MaskBackend

    class WrongSize(MaskBackend):
        name = "wrong"

        def predict(self, image, box):
            return [(np.ones((2, 2), bool), 1.0)]

    dataset, sidecar = corpus
    with pytest.raises(RenderFailure) as exc:
        run_pipeline(dataset, mock_config(sidecar), mask_backend=WrongSize())
    assert exc.value.kind is PromptKind.F1
    report = run_pipeline(dataset, mock_config(sidecar, skip_bad_images=True), mask_backend=WrongSize())
    assert report.counts["skipped_images"] == len(dataset)


def test_no_ground_truth_gives_no_accuracy(tmp_path):
    save_image(noise_image(20, 20, 0), tmp_path / "i.png")
    rec = ImageRecord("i", "i.png", 20, 20, (Entry("e", ("x",)),), (BoundingBox(0, 0, 20, 20),))
    report = run_pipeline(Dataset((rec,), tmp_path / "d.jsonl"), mock_config(tmp_path / "none.jsonl",
                          mock_answers=None))
    assert report.accuracy is None and len(report.predictions) == 1


def _pred(image_id, entry_id, box, d=0):
    return Prediction(image_id, entry_id, d, box, 1.0, "joint")


def _gt_dataset(gt_boxes):
    entries = tuple(Entry(f"e{i}", ("x",), b) for i, b in enumerate(gt_boxes))
    return Dataset((ImageRecord("i", "i.png", 100, 100, entries, (BoundingBox(0, 0, 1, 1),)),))


def test_evaluate_examples():
    gts = [BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 20, 20)]
    ds = _gt_dataset(gts)
    assert evaluate_accuracy([_pred("i", f"e{i}", b) for i, b in enumerate(gts)], ds) == 1.0
    far = BoundingBox(90, 0, 5, 5)
    assert evaluate_accuracy([_pred("i", "e0", far), _pred("i", "e1", far)], ds) == 0.0
    # IoU exactly 0.5: 10x10 gt, prediction covering half of it plus nothing else
    half = BoundingBox(0, 0, 10, 5)
    assert iou(half, gts[0]) == 0.5
    assert evaluate_accuracy([_pred("i", "e0", half)], ds, 0.5) == 1.0


def test_evaluate_errors():
    ds = Dataset((ImageRecord("i", "i.png", 10, 10, (Entry("e", ("x",)),), (BoundingBox(0, 0, 1, 1),)),))
    with pytest.raises(MissingGroundTruth):
        evaluate_accuracy([_pred("i", "e", BoundingBox(0, 0, 1, 1))], ds)
    with pytest.raises(ValidationError):
        evaluate_accuracy([_pred("i", "zzz", BoundingBox(0, 0, 1, 1))], ds)
    with pytest.raises(ValidationError):
        evaluate_accuracy([], ds)


coords = st.integers(0, 20)
box_st = st.builds(BoundingBox, coords, coords, st.integers(1, 15), st.integers(1, 15))


@settings(max_examples=60)
@given(st.lists(st.tuples(box_st, box_st), min_size=1, max_size=8), st.sampled_from([0.3, 0.5, 0.75, 1.0]))
def test_evaluate_matches_brute_force(pairs, threshold):
    gts = [g for g, _ in pairs]
    ds = _gt_dataset(gts)
    preds = [_pred("i", f"e{i}", p) for i, (_, p) in enumerate(pairs)]

    def cells(b):
        return {(x, y) for x in range(int(b.x), int(b.x2)) for y in range(int(b.y), int(b.y2))}

    correct = 0
    for g, p in pairs:
        inter = len(cells(g) & cells(p))
        union = len(cells(g) | cells(p))
        correct += inter >= threshold * union
    assert evaluate_accuracy(preds, ds, threshold) == correct / len(pairs)


def test_ladder_structure():
    cfg = PipelineConfig(backends=("mock",))
    rows = ladder_configs(cfg)
    assert [label for label, _ in rows] == list(ABLATION_LABELS)
    assert len(rows) == 5
    c1, c2, c3, c4, c5 = (c for _, c in rows)
    assert c1.kinds == (PromptKind.C1,) and c1.template == "a photo of {}" and not c1.reduce_text
    assert c2.kinds == cfg.kinds
    assert c3.reduce_text and c3.template == ""
    assert c4.render == cfg.render and c4.min_area_frac == cfg.min_area_frac and not c4.joint_enabled
    assert c5.joint_enabled
    assert ABLATION_LABELS[4] == "+joint prediction"


def test_ablation_on_corpus(corpus):
    dataset, sidecar = corpus
    rows = ablate(dataset, mock_config(sidecar))
    accs = [a for _, a in rows]
    assert len(rows) == 5
    assert accs[4] >= accs[3]
    assert accs[3] == 0.5 and accs[4] == 1.0
    table = format_table(rows)
    assert "+joint prediction" in table and "100.000" in table
