"""Prompt rendering, strict response parsing, and the model adapter interfaces.

Every prompt ends by asking for a machine-readable final line:

* attribution:  ``DIRECTIVE: <reg-1>`` (multi-temporal) or ``DIRECTIVE: <reg-2>`` (enlarge)
* selection:    ``SELECTED: <n>``
* decision:     ``ANSWER: yes`` / ``ANSWER: no``

Parsers never fall back to a default; anything they cannot read raises a
:class:`ParseError` subclass carrying the raw model text.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .ambiguity import AmbiguityRegion
from .raster import Bbox, RasterError, as_binary

KINDS = ("temporal", "enlarge")
TAG_FOR_KIND = {"temporal": "<reg-1>", "enlarge": "<reg-2>"}


# ---------------------------------------------------------------------------
# parse errors


class ParseError(ValueError):
    stage = "unknown"

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class NoDirective(ParseError):
    stage = "directive"


class ConflictingDirective(ParseError):
    stage = "directive"


class RepeatedDirective(ParseError):
    stage = "directive"


class NoSelection(ParseError):
    stage = "selection"


class ContradictorySelection(ParseError):
    stage = "selection"


class SelectionOutOfRange(ParseError):
    stage = "selection"


class NoVerdict(ParseError):
    stage = "verdict"


class AmbiguousVerdict(ParseError):
    stage = "verdict"


# ---------------------------------------------------------------------------
# parsed results


@dataclass(frozen=True)
class QueryDirective:
    kind: str
    rationale_text: str
    region_id: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rationale_text": self.rationale_text, "region_id": self.region_id}


@dataclass(frozen=True)
class SelectionResult:
    chosen_candidate_id: int
    rationale_text: str

    def to_dict(self) -> dict:
        return {"chosen_candidate_id": self.chosen_candidate_id, "rationale_text": self.rationale_text}


@dataclass(frozen=True)
class Verdict:
    value: str
    rationale_text: str

    def __post_init__(self):
        if self.value not in ("yes", "no"):
            raise ValueError(f"verdict must be 'yes' or 'no', got {self.value!r}")

    def to_dict(self) -> dict:
        return {"value": self.value, "rationale_text": self.rationale_text}


# ---------------------------------------------------------------------------
# parsers

TAG_RE = re.compile(r"[<⟨〈〈]\s*reg\s*-\s*([12])\s*[>⟩〉〉]", re.IGNORECASE)
_DIRECTIVE_LABEL_RE = re.compile(r"^[ \t>*#_-]*directive\s*[:：]\s*", re.IGNORECASE | re.MULTILINE)
_SELECTED_RE = re.compile(
    r"^[ \t>*#_-]*selected\s*[:：]\s*[*_]*\s*(?:image\s*)?#?\s*(\d+)\b", re.IGNORECASE | re.MULTILINE)
_IMAGE_REF_RE = re.compile(r"\bimage\s*#?\s*(\d+)\b", re.IGNORECASE)
_ANSWER_RE = re.compile(
    r"^[ \t>*#_-]*answer\s*[:：]\s*[*_\"']*\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)


def _rationale(text: str, *patterns: re.Pattern) -> str:
    for pat in patterns:
        text = pat.sub("", text)
    return text.strip()


def parse_directive(model_text: str, region_id: int | None = None) -> QueryDirective:
    tags = TAG_RE.findall(model_text)
    if not tags:
        raise NoDirective("no <reg-1>/<reg-2> tag in model output", model_text)
    if len(set(tags)) > 1:
        raise ConflictingDirective("both <reg-1> and <reg-2> present", model_text)
    if len(tags) > 1:
        raise RepeatedDirective(f"tag <reg-{tags[0]}> appears {len(tags)} times", model_text)
    kind = "temporal" if tags[0] == "1" else "enlarge"
    return QueryDirective(kind, _rationale(model_text, TAG_RE, _DIRECTIVE_LABEL_RE), region_id)


def parse_selection(model_text: str, offered_ids: Sequence[int]) -> SelectionResult:
    """Read the chosen candidate number.

    The ``SELECTED: <n>`` slot wins when present.  Without it, a reply that
    names exactly one ``Image <n>`` is accepted.
    """
    offered = [int(i) for i in offered_ids]
    if not offered:
        raise ValueError("offered_ids must be non-empty")
    slots = {int(v) for v in _SELECTED_RE.findall(model_text)}
    if slots:
        picks, pattern = slots, _SELECTED_RE
    else:
        picks, pattern = {int(v) for v in _IMAGE_REF_RE.findall(model_text)}, None
    if not picks:
        raise NoSelection("no SELECTED slot or image reference in model output", model_text)
    if len(picks) > 1:
        raise ContradictorySelection(f"several candidates named: {sorted(picks)}", model_text)
    (pick,) = picks
    if pick not in offered:
        raise SelectionOutOfRange(f"candidate {pick} not among offered {offered}", model_text)
    rationale = _rationale(model_text, pattern) if pattern else model_text.strip()
    return SelectionResult(pick, rationale)


def parse_verdict(model_text: str) -> Verdict:
    values = {v.lower() for v in _ANSWER_RE.findall(model_text)}
    if not values:
        raise NoVerdict("no 'ANSWER: yes|no' line in model output", model_text)
    if len(values) > 1:
        raise AmbiguousVerdict("answer slot holds both yes and no", model_text)
    (value,) = values
    return Verdict(value, _rationale(model_text, _ANSWER_RE))


FORMAT_REMINDERS = {
    "directive": ("Your previous reply could not be read. End your reply with exactly one final line, "
                  "either 'DIRECTIVE: <reg-1>' or 'DIRECTIVE: <reg-2>', and do not use the tags anywhere else."),
    "selection": ("Your previous reply could not be read. End your reply with exactly one final line "
                  "'SELECTED: <n>' naming one candidate number."),
    "verdict": ("Your previous reply could not be read. End your reply with exactly one final line, "
                "either 'ANSWER: yes' or 'ANSWER: no'."),
}


def with_format_reminder(prompt: str, stage: str) -> str:
    return f"{prompt}\n\n{FORMAT_REMINDERS[stage]}"


# ---------------------------------------------------------------------------
# templates


@lru_cache(maxsize=None)
def load_template(name: str) -> string.Template:
    raw = resources.files("farmmind").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    body = "\n".join(line for line in raw.splitlines() if not line.startswith("##"))
    return string.Template(body.strip("\n") + "\n")


def template_version(name: str) -> str:
    raw = resources.files("farmmind").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    m = re.search(r"^## version:\s*(\S+)", raw, re.MULTILINE)
    return m.group(1) if m else "0"


def render_prompt_i(region: AmbiguityRegion, patch_meta: Mapping) -> str:
    b = region.bbox
    return load_template("prompt_i").substitute(
        width=patch_meta.get("width", "?"),
        height=patch_meta.get("height", "?"),
        season=patch_meta.get("season") or "an unknown season",
        x_min=b.x_min, y_min=b.y_min, x_max=b.x_max, y_max=b.y_max,
    )


def _describe_candidate(index: int, cand) -> str:
    meta = cand if isinstance(cand, Mapping) else cand.meta()
    parts = [f"Image {index}: {meta.get('season', 'unknown season')}"]
    if meta.get("acquisition_tag"):
        parts.append(f"acquired {meta['acquisition_tag']}")
    if meta.get("source_scene_id"):
        parts.append(f"scene {meta['source_scene_id']}")
    return ", ".join(parts)


def render_prompt_ii(candidates: Sequence, directive_kind: str) -> str:
    """Selection prompt; candidates are numbered 1..N in the given order."""
    if directive_kind not in KINDS:
        raise ValueError(f"unknown directive kind {directive_kind!r}")
    if not candidates:
        raise ValueError("render_prompt_ii needs at least one candidate")
    listing = "\n".join(_describe_candidate(i, c) for i, c in enumerate(candidates, start=1))
    return load_template(f"prompt_ii_{directive_kind}").substitute(count=len(candidates), candidates=listing)


def render_prompt_iii(directive_kind: str) -> str:
    if directive_kind not in KINDS:
        raise ValueError(f"unknown directive kind {directive_kind!r}")
    return load_template(f"prompt_iii_{directive_kind}").substitute()


# ---------------------------------------------------------------------------
# mask run-length codec (wire format)


def encode_rle(mask) -> list[int]:
    """Alternating run lengths over the row-major mask, starting with background."""
    flat = as_binary(mask).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(rle: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    runs = [int(r) for r in rle]
    if any(r < 0 for r in runs):
        raise RasterError("negative run length")
    if any(r == 0 for r in runs[1:]):
        raise RasterError("zero-length run after the first position")
    if sum(runs) != h * w:
        raise RasterError(f"run lengths sum to {sum(runs)}, expected {h * w}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# adapter interfaces


@runtime_checkable
class RqmAdapter(Protocol):
    """Multimodal reasoning model: images plus prompt in, text out."""

    name: str

    def complete(self, images: Sequence[np.ndarray], prompt: str,
                 params: Mapping | None = None) -> str: ...


@runtime_checkable
class FsmAdapter(Protocol):
    """Segmentation model: returns ``(binary_mask, confidence_map)`` matching the image size."""

    name: str

    def segment(self, image: np.ndarray, box: Bbox | None = None) -> tuple[np.ndarray, np.ndarray]: ...
