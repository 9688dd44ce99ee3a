"""Description normalisation and redundant-phrase removal."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

from .errors import BadTemplate

DEFAULT_STOP_PHRASES = ("a photo of", "an image of", "a picture of", "there is", "there are")
PLACEHOLDER = "{}"
_TERMINAL_PUNCT = ".!?,;:"
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class RedundancyRules:
    stop_phrases: tuple[str, ...] = DEFAULT_STOP_PHRASES
    lowercase: bool = True
    strip_punct: bool = True

    def __post_init__(self):
        phrases = tuple(_WS.sub(" ", p.strip()) for p in self.stop_phrases)
        if not phrases or not all(phrases):
            raise ValueError("stop_phrases must be non-empty strings")
        object.__setattr__(self, "stop_phrases", phrases)

    @cached_property
    def pattern(self) -> re.Pattern:
        ordered = sorted(set(p.lower() for p in self.stop_phrases), key=lambda p: (-len(p), p))
        alts = "|".join(r"\s+".join(map(re.escape, p.split(" "))) for p in ordered)
        return re.compile(rf"(?<!\w)(?:{alts})(?!\w)", re.IGNORECASE)


def normalize(text: str, rules: RedundancyRules) -> str:
    out = _WS.sub(" ", text).strip()
    if rules.lowercase:
        out = out.lower()
    if rules.strip_punct:
        out = out.rstrip(_TERMINAL_PUNCT + " ")
    return out


def reduce(text: str, rules: RedundancyRules | None = None) -> str:
    """Delete stop phrases (whole words, longest first) until none remain.

    Falls back to the normalised input if nothing would be left, and to the
    whitespace-collapsed input if normalisation alone empties it.
    """
    rules = rules or RedundancyRules()
    base = normalize(text, rules) or _WS.sub(" ", text).strip()
    out = base
    while True:
        nxt = normalize(rules.pattern.sub(" ", out), rules)
        if nxt == out:
            break
        out = nxt
    return out if out else base


def apply_template(text: str, template: str) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise BadTemplate(template)
    return template.replace(PLACEHOLDER, text)


def subtraction_hook(text: str) -> str:
    """Identity stand-in for soft (negative-text subtraction) denoising.

    Swap in an external implementation to benchmark it against ``reduce``.
    """
    return text


def prepare(
    text: str,
    rules: RedundancyRules | None,
    template: str | None = None,
    hook: Callable[[str], str] | None = None,
) -> str:
    """Text actually sent to the scorer: optional template, then optional reduction."""
    if template:
        text = apply_template(text, template)
    if rules is not None:
        text = reduce(text, rules)
    if hook is not None:
        text = hook(text)
    return text
