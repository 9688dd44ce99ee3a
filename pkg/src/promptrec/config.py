"""Pipeline configuration: a flat TOML document of dotted keys, validated against a schema."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .prompts import DEFAULT_BINDINGS, DEFAULT_KINDS, OPERATIONS, PromptKind, RenderParams
from .text import DEFAULT_STOP_PHRASES, RedundancyRules

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KNOWN_BACKENDS = ("vitb32", "rn50x16", "mock")

# key -> (type check, description of the type)
_SCHEMA: dict[str, tuple[type | tuple, str]] = {
    "prompt.kinds": (list, "list of kind tags"),
    "prompt.bindings": (dict, "table of tag -> operation"),
    "render.circle_thickness": (int, "int"),
    "render.contour_thickness": (int, "int"),
    "render.pad_gray": (list, "3 ints"),
    "render.blur_sigma": ((int, float), "number"),
    "render.circle_color": (list, "3 ints"),
    "render.box_color": (list, "3 ints"),
    "text.reduce": (bool, "bool"),
    "text.stop_phrases": (list, "list of strings"),
    "text.lowercase": (bool, "bool"),
    "text.strip_punct": (bool, "bool"),
    "text.template": (str, "string"),
    "data.min_area_frac": ((int, float), "number"),
    "data.box_format": (str, "xywh|xyxy"),
    "eval.iou_threshold": ((int, float), "number"),
    "scoring.backends": (list, "list of backend names"),
    "scoring.weights": (list, "list of numbers"),
    "scoring.temperature": ((int, float), "number"),
    "scoring.fusion": (str, "softmax_mean|raw_sum"),
    "scoring.batch_size": (int, "int"),
    "scoring.mock_answers": (str, "path"),
    "scoring.mock_noise": ((int, float), "number"),
    "joint.enabled": (bool, "bool"),
    "joint.aggregate": (str, "mean|sum"),
    "joint.weight": (str, "prob|logprob"),
    "mask.backend": (str, "boxfill|sam"),
    "mask.cache_dir": (str, "path"),
    "mask.sam_checkpoint": (str, "path"),
    "run.workers": (int, "int"),
    "run.skip_bad_images": (bool, "bool"),
    "run.seed": (int, "int"),
    "ablation.template": (str, "string"),
}


@dataclass(frozen=True)
class PipelineConfig:
    kinds: tuple[PromptKind, ...] = DEFAULT_KINDS
    bindings: dict = field(default_factory=lambda: dict(DEFAULT_BINDINGS))
    render: RenderParams = field(default_factory=RenderParams)
    text_rules: RedundancyRules = field(default_factory=RedundancyRules)
    reduce_text: bool = True
    template: str = ""
    min_area_frac: float = 0.05
    box_format: str = "xywh"
    iou_threshold: float = 0.5
    backends: tuple[str, ...] = ("vitb32", "rn50x16")
    backend_weights: tuple[float, ...] | None = None
    temperature: float = 0.01
    fusion: str = "softmax_mean"
    batch_size: int = 64
    mock_answers: str | None = None
    mock_noise: float = 0.0
    joint_enabled: bool = True
    aggregate: str = "mean"
    assign_weight: str = "prob"
    mask_backend: str = "boxfill"
    cache_dir: str | None = None
    sam_checkpoint: str | None = None
    workers: int = 1
    skip_bad_images: bool = False
    seed: int = 0
    ablation_template: str = "a photo of {}"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.kinds:
            raise ConfigError("prompt.kinds must not be empty")
        if not self.backends:
            raise ConfigError("scoring.backends must not be empty")
        for b in self.backends:
            if b not in KNOWN_BACKENDS and not b.startswith("mock"):
                raise ConfigError(f"unknown backend {b!r}")
        if self.backend_weights is not None and len(self.backend_weights) != len(self.backends):
            raise ConfigError("scoring.weights must match scoring.backends")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("eval.iou_threshold must be in (0, 1]")
        if not 0 <= self.min_area_frac < 1:
            raise ConfigError("data.min_area_frac must be in [0, 1)")
        if not self.temperature > 0:
            raise ConfigError("scoring.temperature must be positive")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("scoring.batch_size and run.workers must be >= 1")
        choices = {
            "scoring.fusion": (self.fusion, ("softmax_mean", "raw_sum")),
            "joint.aggregate": (self.aggregate, ("mean", "sum")),
            "joint.weight": (self.assign_weight, ("prob", "logprob")),
            "mask.backend": (self.mask_backend, ("boxfill", "sam")),
            "data.box_format": (self.box_format, ("xywh", "xyxy")),
        }
        for key, (value, allowed) in choices.items():
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        for tag, op in self.bindings.items():
            if tag not in DEFAULT_BINDINGS or op not in OPERATIONS:
                raise ConfigError(f"bad binding {tag} -> {op}")
            if PromptKind(tag).fine != OPERATIONS[op][1]:
                raise ConfigError(f"binding {tag} -> {op} crosses granularity")
        for t in (self.template, self.ablation_template):
            if t and t.count("{}") != 1:
                raise ConfigError(f"template needs exactly one '{{}}': {t!r}")

    def snapshot(self) -> dict[str, Any]:
        r, t = self.render, self.text_rules
        return {
            "prompt.kinds": [k.value for k in self.kinds],
            "prompt.bindings": dict(sorted(self.bindings.items())),
            "render.circle_thickness": r.circle_thickness,
            "render.contour_thickness": r.contour_thickness,
            "render.pad_gray": list(r.pad_gray),
            "render.blur_sigma": r.blur_sigma,
            "render.circle_color": list(r.circle_color),
            "render.box_color": list(r.box_color),
            "text.reduce": self.reduce_text,
            "text.stop_phrases": list(t.stop_phrases),
            "text.lowercase": t.lowercase,
            "text.strip_punct": t.strip_punct,
            "text.template": self.template,
            "data.min_area_frac": self.min_area_frac,
            "data.box_format": self.box_format,
            "eval.iou_threshold": self.iou_threshold,
            "scoring.backends": list(self.backends),
            "scoring.weights": list(self.backend_weights) if self.backend_weights else None,
            "scoring.temperature": self.temperature,
            "scoring.fusion": self.fusion,
            "scoring.batch_size": self.batch_size,
            "scoring.mock_answers": self.mock_answers,
            "scoring.mock_noise": self.mock_noise,
            "joint.enabled": self.joint_enabled,
            "joint.aggregate": self.aggregate,
            "joint.weight": self.assign_weight,
            "mask.backend": self.mask_backend,
            "run.seed": self.seed,
            "ablation.template": self.ablation_template,
        }

    def digest(self) -> str:
        raw = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "prompt.bindings":
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _check(key: str, value):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ, desc = _SCHEMA[key]
    ok = isinstance(value, typ) and not (typ in (int, (int, float)) and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{key}: expected {desc}, got {value!r}")


def config_from_mapping(doc: dict[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    flat = _flatten(doc)
    for k, v in flat.items():
        _check(k, v)
    base = base or PipelineConfig()
    g = flat.get
    try:
        render = RenderParams(
            circle_thickness=g("render.circle_thickness", base.render.circle_thickness),
            contour_thickness=g("render.contour_thickness", base.render.contour_thickness),
            pad_gray=tuple(g("render.pad_gray", base.render.pad_gray)),
            blur_sigma=float(g("render.blur_sigma", base.render.blur_sigma)),
            circle_color=tuple(g("render.circle_color", base.render.circle_color)),
            box_color=tuple(g("render.box_color", base.render.box_color)),
        )
        rules = RedundancyRules(
            stop_phrases=tuple(g("text.stop_phrases", base.text_rules.stop_phrases)),
            lowercase=g("text.lowercase", base.text_rules.lowercase),
            strip_punct=g("text.strip_punct", base.text_rules.strip_punct),
        )
        kinds = tuple(PromptKind(str(k).upper()) for k in g("prompt.kinds", [k.value for k in base.kinds]))
        weights = g("scoring.weights", base.backend_weights)
        return PipelineConfig(
            kinds=kinds,
            bindings=dict(base.bindings, **g("prompt.bindings", {})),
            render=render,
            text_rules=rules,
            reduce_text=g("text.reduce", base.reduce_text),
            template=g("text.template", base.template),
            min_area_frac=float(g("data.min_area_frac", base.min_area_frac)),
            box_format=g("data.box_format", base.box_format),
            iou_threshold=float(g("eval.iou_threshold", base.iou_threshold)),
            backends=tuple(g("scoring.backends", base.backends)),
            backend_weights=tuple(float(w) for w in weights) if weights is not None else None,
            temperature=float(g("scoring.temperature", base.temperature)),
            fusion=g("scoring.fusion", base.fusion),
            batch_size=g("scoring.batch_size", base.batch_size),
            mock_answers=g("scoring.mock_answers", base.mock_answers),
            mock_noise=float(g("scoring.mock_noise", base.mock_noise)),
            joint_enabled=g("joint.enabled", base.joint_enabled),
            aggregate=g("joint.aggregate", base.aggregate),
            assign_weight=g("joint.weight", base.assign_weight),
            mask_backend=g("mask.backend", base.mask_backend),
            cache_dir=g("mask.cache_dir", base.cache_dir),
            sam_checkpoint=g("mask.sam_checkpoint", base.sam_checkpoint),
            workers=g("run.workers", base.workers),
            skip_bad_images=g("run.skip_bad_images", base.skip_bad_images),
            seed=g("run.seed", base.seed),
            ablation_template=g("ablation.template", base.ablation_template),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a config file; relative paths inside it resolve against its directory."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat = _flatten(doc)
    for key in ("scoring.mock_answers", "mask.cache_dir", "mask.sam_checkpoint"):
        if isinstance(flat.get(key), str) and not Path(flat[key]).is_absolute():
            flat[key] = str(path.parent / flat[key])
    return config_from_mapping(flat)
