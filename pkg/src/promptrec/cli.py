"""``promptrec`` command line. Exit codes: 0 ok, 2 validation error, 1 runtime failure."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import load_config
from .data import filter_indices, image_digest, load_dataset, load_image
from .errors import PromptRecError, ValidationError
from .masks import CACHE_ENV, MaskCache, make_mask_backend, segment
from .pipeline import ablate, evaluate_accuracy, format_table, read_predictions, run_pipeline
from .prompts import Renderer, parse_kinds
from .text import prepare

log = logging.getLogger("promptrec")


def _dataset(args, config=None):
    box_format = args.box_format or (config.box_format if config else "xywh")
    return load_dataset(args.dataset, box_format)


def cmd_run(args) -> int:
    config = load_config(args.config)
    changes = {}
    if args.no_reduce:
        changes["reduce_text"] = False
    if args.workers:
        changes["workers"] = args.workers
    if args.skip_bad_images:
        changes["skip_bad_images"] = True
    if changes:
        config = config.replace(**changes)
    report = run_pipeline(_dataset(args, config), config, args.out)
    print(json.dumps({"accuracy": report.accuracy, "counts": report.counts,
                      "config_hash": report.config_hash}))
    return 0


def cmd_evaluate(args) -> int:
    dataset = _dataset(args)
    acc = evaluate_accuracy(read_predictions(args.pred), dataset, args.iou)
    print(f"accuracy {acc:.6f}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    rows = ablate(_dataset(args, config), config)
    table = format_table(rows)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return 0


def cmd_visualize(args) -> int:
    from PIL import Image

    config = load_config(args.config)
    dataset = _dataset(args, config)
    try:
        record = dataset.record(args.image)
    except KeyError:
        raise ValidationError(f"unknown image {args.image!r}") from None
    kinds = parse_kinds(args.kinds) if args.kinds else list(config.kinds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    image = load_image(dataset, record)
    renderer = Renderer(image, config.render, config.bindings)
    mask_backend = make_mask_backend(config.mask_backend, **(
        {"checkpoint": config.sam_checkpoint} if config.mask_backend == "sam" else {}))
    cache = MaskCache.from_env(config.cache_dir)
    digest = image_digest(image)
    for idx in filter_indices(record, config.min_area_frac):
        box = record.proposals[idx]
        mask = None
        for kind in kinds:
            if kind.fine and mask is None:
                mask = segment(image, box, mask_backend, cache, digest)
            pixels = renderer.render(box, kind, mask if kind.fine else None)
            Image.fromarray(pixels).save(out / f"{record.image_id}_{idx}_{kind.value}.png")

    if args.entry:
        try:
            entry = record.entry(args.entry)
        except KeyError:
            raise ValidationError(f"unknown entry {args.entry!r}") from None
        rules = config.text_rules if config.reduce_text else None
        texts = [prepare(d, rules, config.template or None) for d in entry.descriptions]
        (out / f"{record.image_id}_{entry.entry_id}_texts.json").write_text(
            json.dumps({"descriptions": list(entry.descriptions), "scored_as": texts}, indent=2) + "\n",
            encoding="utf-8",
        )
    return 0


def cmd_segment_cache(args) -> int:
    dataset = _dataset(args)
    cache_dir = args.cache_dir or os.environ.get(CACHE_ENV)
    if not cache_dir:
        raise ValidationError(f"--cache-dir or {CACHE_ENV} is required")
    backend = make_mask_backend(args.backend, **({"checkpoint": args.checkpoint} if args.backend == "sam" else {}))
    cache = MaskCache(cache_dir)
    for record in dataset:
        image = load_image(dataset, record)
        digest = image_digest(image)
        for idx in filter_indices(record, args.min_area_frac):
            segment(image, record.proposals[idx], backend, cache, digest)
    print(json.dumps({"written": cache.misses, "cached": cache.hits}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="promptrec", description="Zero-shot referring expression comprehension")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def dataset_args(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--box-format", choices=["xywh", "xyxy"], default=None)

    p = sub.add_parser("run", help="predict boxes for a dataset")
    dataset_args(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-reduce", action="store_true", help="disable redundant-phrase removal")
    p.add_argument("--skip-bad-images", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score a predictions file")
    dataset_args(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the cumulative ablation ladder")
    dataset_args(p)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="write prompted images for one image")
    dataset_args(p)
    p.add_argument("--config")
    p.add_argument("--image", required=True)
    p.add_argument("--entry")
    p.add_argument("--kinds", help="comma separated, e.g. C1,C3,C4,F1,F2,F3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("segment-cache", help="pre-compute masks for every proposal")
    dataset_args(p)
    p.add_argument("--backend", choices=["sam", "boxfill"], default="boxfill")
    p.add_argument("--cache-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--min-area-frac", type=float, default=0.05)
    p.set_defaults(func=cmd_segment_cache)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PromptRecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
