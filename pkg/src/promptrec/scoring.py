"""Image-text similarity scoring over rendered prompts, normalisation and fusion."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import BoundingBox
from .errors import BackendUnavailable, NonFiniteScore, RenderFailure, ValidationError
from .masks import BinaryMask
from .prompts import PromptKind, RenderParams, Renderer
from .text import RedundancyRules, reduce


@dataclass(frozen=True)
class ScoreContext:
    """Side information handed to backends alongside a batch.

    Real backends ignore it; the mock backend uses it to look up planted answers.
    """

    image_id: str = ""
    proposal_ids: tuple[int, ...] = ()  # one per image in the batch
    kinds: tuple[PromptKind, ...] = ()  # one per image in the batch
    entry_ids: tuple[str, ...] = ()  # one per text


class ScorerBackend:
    name = "base"
    version = "0"
    parallel_safe = False

    def score(self, images: Sequence[np.ndarray], texts: Sequence[str],
              context: ScoreContext | None = None) -> np.ndarray:
        """Return a ``(len(texts), len(images))`` similarity matrix."""
        raise NotImplementedError


_lock_guard = threading.Lock()
_locks: dict[int, threading.Lock] = {}


def _backend_lock(backend: ScorerBackend) -> threading.Lock:
    with _lock_guard:
        return _locks.setdefault(id(backend), threading.Lock())


def call_backend(backend: ScorerBackend, images, texts, context=None) -> np.ndarray:
    if backend.parallel_safe:
        out = backend.score(images, texts, context)
    else:
        with _backend_lock(backend):
            out = backend.score(images, texts, context)
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (len(texts), len(images)):
        raise ValidationError(
            f"backend {backend.name!r} returned shape {out.shape}, expected {(len(texts), len(images))}"
        )
    return out


# -- mock backend -----------------------------------------------------------


def load_planted(path: str | Path) -> dict[tuple[str, str], int | list[float]]:
    """Read a planted-answer sidecar.

    One JSON object per line with ``image_id``, ``entry_id`` and either
    ``proposal`` (index into the record's proposal list) or ``scores``
    (one raw score per proposal).
    """
    planted = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            key = (str(obj["image_id"]), str(obj["entry_id"]))
            if "scores" in obj:
                planted[key] = [float(s) for s in obj["scores"]]
            elif "proposal" in obj:
                planted[key] = int(obj["proposal"])
            else:
                raise ValidationError(f"{path}:{lineno}: need 'proposal' or 'scores'")
    return planted


def _unit_hash(*parts: str) -> float:
    digest = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64 * 2.0 - 1.0


class MockBackend(ScorerBackend):
    """Deterministic scorer with planted answers.

    A planted index scores 1 against 0 elsewhere; a planted score list is
    returned verbatim. ``noise`` adds a content-hash perturbation in
    ``[-noise, noise)`` so differently named mocks produce different slices.
    """

    version = "1"
    parallel_safe = True

    def __init__(self, planted: Mapping[tuple[str, str], int | Sequence[float]] | None = None,
                 noise: float = 0.0, name: str = "mock"):
        self.planted = dict(planted or {})
        self.noise = noise
        self.name = name

    def _base(self, image_id: str, entry_id: str, proposal: int) -> float:
        answer = self.planted.get((image_id, entry_id))
        if answer is None:
            return 0.0
        if isinstance(answer, int):
            return 1.0 if proposal == answer else 0.0
        return float(answer[proposal]) if proposal < len(answer) else 0.0

    def score(self, images, texts, context=None):
        context = context or ScoreContext()
        out = np.zeros((len(texts), len(images)))
        digests = [hashlib.sha256(np.ascontiguousarray(im).tobytes()).hexdigest() for im in images]
        for t, text in enumerate(texts):
            entry_id = context.entry_ids[t] if t < len(context.entry_ids) else ""
            for i in range(len(images)):
                p = context.proposal_ids[i] if i < len(context.proposal_ids) else i
                v = self._base(context.image_id, entry_id, p)
                if self.noise:
                    v += self.noise * _unit_hash(self.name, digests[i], text)
                out[t, i] = v
        return out


# -- CLIP backends ----------------------------------------------------------

CLIP_MODELS = {
    "vitb32": ("hf", "openai/clip-vit-base-patch32"),
    "rn50x16": ("open_clip", "RN50x16"),
}


class ClipBackend(ScorerBackend):
    """Cosine similarity from a pretrained CLIP model, weights loaded from local files only.

    ``PROMPTREC_CLIP_<NAME>`` (e.g. ``PROMPTREC_CLIP_VITB32``) may point at a
    local weights directory or checkpoint.
    """

    version = "1"
    parallel_safe = False

    def __init__(self, name: str, device: str | None = None, batch_size: int = 64):
        if name not in CLIP_MODELS:
            raise BackendUnavailable(name, "unknown CLIP backend")
        self.name = name
        self.batch_size = batch_size
        kind, model_id = CLIP_MODELS[name]
        model_id = os.environ.get(f"PROMPTREC_CLIP_{name.upper()}", model_id)
        try:
            import torch
        except ImportError as exc:
            raise BackendUnavailable(name, str(exc)) from exc
        self._torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        try:
            if kind == "hf":
                from transformers import CLIPModel, CLIPProcessor

                self._model = CLIPModel.from_pretrained(model_id, local_files_only=True).to(self.device)
                self._processor = CLIPProcessor.from_pretrained(model_id, local_files_only=True)
                self._kind = "hf"
            else:
                import open_clip

                pretrained = model_id if os.path.isfile(model_id) else "openai"
                arch = "RN50x16" if os.path.isfile(model_id) else model_id
                model, _, preprocess = open_clip.create_model_and_transforms(arch, pretrained=pretrained)
                self._model = model.to(self.device)
                self._preprocess = preprocess
                self._tokenizer = open_clip.get_tokenizer(arch)
                self._kind = "open_clip"
        except BackendUnavailable:
            raise
        except Exception as exc:  # missing package, weights or network
            raise BackendUnavailable(name, f"{type(exc).__name__}: {exc}") from exc
        self._model.eval()
        self.version = f"{kind}:{model_id}"

    def _encode_images(self, images):
        from PIL import Image

        torch = self._torch
        feats = []
        for start in range(0, len(images), self.batch_size):
            pil = [Image.fromarray(im) for im in images[start:start + self.batch_size]]
            with torch.no_grad():
                if self._kind == "hf":
                    inputs = self._processor(images=pil, return_tensors="pt").to(self.device)
                    f = self._model.get_image_features(**inputs)
                else:
                    batch = torch.stack([self._preprocess(p) for p in pil]).to(self.device)
                    f = self._model.encode_image(batch)
            feats.append(f.float())
        f = torch.cat(feats)
        return f / f.norm(dim=-1, keepdim=True)

    def _encode_texts(self, texts):
        torch = self._torch
        with torch.no_grad():
            if self._kind == "hf":
                inputs = self._processor(text=list(texts), return_tensors="pt", padding=True,
                                         truncation=True).to(self.device)
                f = self._model.get_text_features(**inputs)
            else:
                f = self._model.encode_text(self._tokenizer(list(texts)).to(self.device))
        f = f.float()
        return f / f.norm(dim=-1, keepdim=True)

    def score(self, images, texts, context=None):
        sims = self._encode_texts(texts) @ self._encode_images(images).T
        return sims.cpu().numpy().astype(np.float64)


def make_backend(name: str, *, mock_answers: str | Path | None = None, mock_noise: float = 0.0,
                 batch_size: int = 64) -> ScorerBackend:
    if name == "mock" or name.startswith("mock"):
        planted = load_planted(mock_answers) if mock_answers else {}
        return MockBackend(planted, noise=mock_noise, name=name)
    return ClipBackend(name, batch_size=batch_size)


# -- score tensors ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScoreTensor:
    """Similarities indexed ``(description, proposal, kind, backend)``."""

    values: np.ndarray
    descriptions: tuple[str, ...]
    proposals: tuple[int, ...]
    kinds: tuple[PromptKind, ...]
    backends: tuple[str, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        expected = (len(self.descriptions), len(self.proposals), len(self.kinds), len(self.backends))
        if v.shape != expected:
            raise ValueError(f"values shape {v.shape} != axis sizes {expected}")
        if not np.isfinite(v).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(v))[0])
            raise NonFiniteScore(f"non-finite score at {bad}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "ScoreTensor":
        return ScoreTensor(values, self.descriptions, self.proposals, self.kinds, self.backends)


def softmax(values: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(values, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_normalize(tensor: ScoreTensor, temperature: float = 0.01) -> ScoreTensor:
    """Per (description, kind, backend) softmax over proposals."""
    return tensor.with_values(softmax(tensor.values, temperature, axis=1))


def _backend_weights(n: int, weights: Sequence[float] | None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"need {n} non-negative backend weights, got {weights!r}")
    return w / w.sum()


def ensemble(tensor: ScoreTensor, weights: Sequence[float] | None = None) -> np.ndarray:
    """Mean over kinds and (optionally weighted) backends; returns (description, proposal)."""
    w = _backend_weights(len(tensor.backends), weights)
    per_backend = tensor.values.mean(axis=2)
    return per_backend @ w


def fuse(tensor: ScoreTensor, temperature: float = 0.01, mode: str = "softmax_mean",
         weights: Sequence[float] | None = None) -> np.ndarray:
    """Raw tensor to (description, proposal) probabilities."""
    if mode == "softmax_mean":
        return ensemble(softmax_normalize(tensor, temperature), weights)
    if mode == "raw_sum":
        w = _backend_weights(len(tensor.backends), weights) * len(tensor.backends)
        return softmax(tensor.values.sum(axis=2) @ w, temperature, axis=1)
    raise ValueError(f"unknown fusion mode {mode!r}")


# -- scoring ----------------------------------------------------------------


@dataclass
class EntryTexts:
    entry_id: str
    texts: list[str] = field(default_factory=list)


def score_image(
    image: np.ndarray,
    proposals: Sequence[BoundingBox],
    groups: Sequence[EntryTexts],
    kinds: Sequence[PromptKind],
    backends: Sequence[ScorerBackend],
    params: RenderParams | None = None,
    *,
    masks: Callable[[int], BinaryMask] | Sequence[BinaryMask] | None = None,
    proposal_ids: Sequence[int] | None = None,
    image_id: str = "",
    batch_size: int = 64,
    bindings: Mapping[str, str] | None = None,
    renderer: Renderer | None = None,
) -> list[ScoreTensor]:
    """Score every entry of one image, rendering each (proposal, kind) once."""
    if not proposals:
        raise ValueError("no proposals to score")
    if not kinds:
        raise ValueError("no prompt kinds configured")
    if not backends:
        raise ValueError("no scorer backends configured")
    kinds = tuple(PromptKind(k) for k in kinds)
    proposal_ids = tuple(proposal_ids) if proposal_ids is not None else tuple(range(len(proposals)))
    renderer = renderer or Renderer(image, params, bindings)

    get_mask = masks if callable(masks) or masks is None else masks.__getitem__
    renders, img_pids, img_kinds = [], [], []
    for p, box in enumerate(proposals):
        mask = None
        for k in kinds:
            if k.fine and mask is None:
                if get_mask is None:
                    raise RenderFailure(proposal_ids[p], k, ValueError("fine kind without a mask provider"))
                try:
                    mask = get_mask(p)
                except BackendUnavailable:
                    raise
                except Exception as exc:
                    raise RenderFailure(proposal_ids[p], k, exc) from exc
            try:
                renders.append(renderer.render(box, k, mask if k.fine else None))
            except Exception as exc:
                raise RenderFailure(proposal_ids[p], k, exc) from exc
            img_pids.append(proposal_ids[p])
            img_kinds.append(k)

    texts, text_entries = [], []
    for g in groups:
        if not g.texts:
            raise ValueError(f"entry {g.entry_id!r} has no descriptions")
        texts.extend(g.texts)
        text_entries.extend([g.entry_id] * len(g.texts))

    P, K = len(proposals), len(kinds)
    values = np.empty((len(texts), P, K, len(backends)))
    for b, backend in enumerate(backends):
        cols = []
        for start in range(0, len(renders), batch_size):
            stop = start + batch_size
            ctx = ScoreContext(image_id, tuple(img_pids[start:stop]), tuple(img_kinds[start:stop]),
                               tuple(text_entries))
            cols.append(call_backend(backend, renders[start:stop], texts, ctx))
        values[:, :, :, b] = np.concatenate(cols, axis=1).reshape(len(texts), P, K)

    names = tuple(be.name for be in backends)
    out, row = [], 0
    for g in groups:
        n = len(g.texts)
        out.append(ScoreTensor(values[row:row + n], tuple(g.texts), proposal_ids, kinds, names))
        row += n
    return out


def score_entry(
    image: np.ndarray,
    proposals: Sequence[BoundingBox],
    descriptions: Sequence[str],
    kinds: Sequence[PromptKind],
    backends: Sequence[ScorerBackend],
    params: RenderParams | None = None,
    *,
    rules: RedundancyRules | None = None,
    entry_id: str = "",
    **kwargs,
) -> ScoreTensor:
    """Score one entry's descriptions; ``rules`` reduces them first when given."""
    if not descriptions:
        raise ValueError("no descriptions to score")
    texts = [reduce(d, rules) if rules is not None else d for d in descriptions]
    return score_image(image, proposals, [EntryTexts(entry_id, texts)], kinds, backends, params,
                       **kwargs)[0]
