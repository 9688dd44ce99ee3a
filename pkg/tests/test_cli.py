import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from helpers import collision_corpus
from promptrec.cli import main
from promptrec.masks import read_mask


@pytest.fixture
def files(tmp_path):
    dataset, sidecar = collision_corpus(tmp_path / "c", n_images=3)
    config = tmp_path / "config.toml"
    config.write_text(f'scoring.backends = ["mock"]\nscoring.mock_answers = "{sidecar}"\n')
    return dataset, config, tmp_path


def test_run_and_evaluate(files, capsys):
    dataset, config, tmp = files
    assert main(["run", "--dataset", str(dataset), "--config", str(config), "--out", str(tmp / "out")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["accuracy"] == 1.0
    pred = tmp / "out" / "predictions.jsonl"
    assert main(["evaluate", "--pred", str(pred), "--dataset", str(dataset)]) == 0
    assert capsys.readouterr().out.strip() == "accuracy 1.000000"
    assert main(["evaluate", "--pred", str(pred), "--dataset", str(dataset), "--iou", "1.0"]) == 0


def test_run_is_byte_identical(files):
    dataset, config, tmp = files
    for name in ("a", "b"):
        main(["run", "--dataset", str(dataset), "--config", str(config), "--out", str(tmp / name)])
    assert (tmp / "a" / "predictions.jsonl").read_bytes() == (tmp / "b" / "predictions.jsonl").read_bytes()


def test_no_reduce_flag_changes_config_hash(files, capsys):
    dataset, config, tmp = files
    main(["run", "--dataset", str(dataset), "--config", str(config), "--out", str(tmp / "a")])
    main(["run", "--dataset", str(dataset), "--config", str(config), "--out", str(tmp / "b"), "--no-reduce"])
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[0])["config_hash"] != json.loads(lines[1])["config_hash"]


def test_ablate(files, capsys):
    dataset, config, tmp = files
    assert main(["ablate", "--dataset", str(dataset), "--config", str(config), "--out", str(tmp / "abl")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].split()[-1] == "100.000"
    assert "+removing redundant" in (tmp / "abl" / "ablation.txt").read_text()


def test_visualize(files):
    dataset, config, tmp = files
    out = tmp / "vis"
    assert main(["visualize", "--dataset", str(dataset), "--config", str(config), "--image", "img000",
                 "--entry", "a", "--kinds", "C1,C3,F3", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.glob("*.png"))
    assert names == sorted(f"img000_{i}_{k}.png" for i in range(3) for k in ("C1", "C3", "F3"))
    c3 = np.asarray(Image.open(out / "img000_0_C3.png"))
    assert c3.shape == (48, 48, 3) and (c3 == [255, 0, 0]).all(-1).any()
    texts = json.loads((out / "img000_a_texts.json").read_text())
    assert texts["scored_as"][0] == "object a number 0"


def test_segment_cache(files, capsys, monkeypatch):
    dataset, _, tmp = files
    cache = tmp / "cache"
    assert main(["segment-cache", "--dataset", str(dataset), "--backend", "boxfill", "--cache-dir", str(cache)]) == 0
    assert json.loads(capsys.readouterr().out) == {"written": 9, "cached": 0}
    files_written = list(cache.rglob("*.rle"))
    assert len(files_written) == 9
    mask, backend = read_mask(files_written[0])
    assert backend == "boxfill@1" and mask.count == 24 * 24
    monkeypatch.setenv("PROMPTREC_CACHE_DIR", str(cache))
    assert main(["segment-cache", "--dataset", str(dataset), "--backend", "boxfill"]) == 0
    assert json.loads(capsys.readouterr().out) == {"written": 0, "cached": 9}


def test_exit_codes(files, tmp_path):
    dataset, config, tmp = files
    bad_config = tmp / "bad.toml"
    bad_config.write_text("prompt.kinds = []\n")
    assert main(["run", "--dataset", str(dataset), "--config", str(bad_config), "--out", str(tmp / "x")]) == 2
    bad_data = tmp / "bad.jsonl"
    bad_data.write_text('{"image_id": "x"}\n')
    assert main(["run", "--dataset", str(bad_data), "--config", str(config), "--out", str(tmp / "x")]) == 2
    assert main(["segment-cache", "--dataset", str(dataset), "--backend", "sam", "--cache-dir", str(tmp)]) == 1
    assert main(["visualize", "--dataset", str(dataset), "--image", "nope", "--out", str(tmp)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_module_entry_point(files):
    dataset, config, tmp = files
    proc = subprocess.run([sys.executable, "-m", "promptrec", "evaluate", "--pred", str(tmp / "missing"),
                           "--dataset", str(dataset)], capture_output=True, text=True)
    assert proc.returncode == 1 and "error" in proc.stderr
