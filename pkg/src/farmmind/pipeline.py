"""End-to-end refinement of one patch or a directory of patches.

Stages per patch: base segmentation and ambiguous-region selection, then for
each region (in region-id order) attribution, auxiliary-image query,
candidate selection, yes/no decision, refiner segmentation of the chosen
image, and verdict-driven add/subtract followed by clamping to {0, 1}.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .adapters import AdapterError, Adapters
from .ambiguity import AmbiguityParams, AmbiguityRegion, annotate_with_box, select_ambiguous_regions
from .imagedb import CandidateImage, CatalogError, QuerySpec
from .io import (
    meta_sidecar_path,
    read_confidence,
    read_geo,
    read_image,
    read_json,
    read_mask,
    write_json,
    write_mask,
)
from .metrics import ConfusionCounts, aggregate, confusion
from .protocol import (
    ParseError,
    QueryDirective,
    SelectionResult,
    Verdict,
    parse_directive,
    parse_selection,
    parse_verdict,
    render_prompt_i,
    render_prompt_ii,
    render_prompt_iii,
    with_format_reminder,
)
from .raster import (
    Bbox,
    GeoTransform,
    RasterError,
    as_binary,
    as_confidence,
    as_image,
    clamp_binary,
    mask_add,
    mask_subtract,
    register_mask,
)

log = logging.getLogger(__name__)

MODES = ("full", "temporal-only", "enlarge-only", "no-query")
STAGES = ("basic_perception", "attribution", "query", "decision", "dynamic_correction")

# Failures that cost one region its correction but never the whole patch.
REGION_FAILURES = (AdapterError, ParseError, RasterError, CatalogError, ValueError, OSError, httpx.HTTPError)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    ambiguity: AmbiguityParams = field(default_factory=AmbiguityParams)
    enlarge_scale: float = 3.0
    patch_px: int = 512
    mode: str = "full"
    workers: int = 1
    stroke_px: int = 3
    parse_retries: int = 1
    # endpoint settings for the HTTP adapters, see config.build_http_adapters
    rqm: dict = field(default_factory=dict)
    segmenter: dict = field(default_factory=dict)
    refiner: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.ambiguity, Mapping):
            try:
                self.ambiguity = AmbiguityParams(**self.ambiguity)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"ambiguity: {exc}") from exc
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.enlarge_scale > 1) or not math.isfinite(self.enlarge_scale):
            raise ConfigError("enlarge_scale must be > 1")
        if self.patch_px <= 0 or self.workers <= 0 or self.stroke_px < 0 or self.parse_retries < 0:
            raise ConfigError("patch_px and workers must be positive; stroke_px and parse_retries >= 0")

    def honors(self, kind: str) -> bool:
        return self.mode == "full" or self.mode == f"{kind}-only"

    def to_dict(self) -> dict:
        d = asdict(self)
        for role in ("rqm", "segmenter", "refiner"):
            d[role] = {k: v for k, v in d[role].items() if k != "api_key"}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Patch:
    patch_id: str
    image: np.ndarray
    geo: GeoTransform
    season: str | None = None
    country: str | None = None
    province: str | None = None
    group: str | None = None
    base_mask: np.ndarray | None = None
    base_confidence: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    @property
    def meta(self) -> dict:
        return {"patch_id": self.patch_id, "width": self.shape[1], "height": self.shape[0],
                "season": self.season, "country": self.country, "province": self.province}


# ---------------------------------------------------------------------------
# trace


@dataclass
class RegionRecord:
    region: AmbiguityRegion
    applied: str = "skip"
    note: str = ""
    prompt_i: str | None = None
    directive: dict | None = None
    honored: bool = False
    query: dict | None = None
    candidates: list = field(default_factory=list)
    prompt_ii: str | None = None
    selection: dict | None = None
    prompt_iii: str | None = None
    verdict: dict | None = None
    ys: dict | None = None
    responses: list = field(default_factory=list)
    error: dict | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "region": self.region.to_dict(),
            "applied": self.applied,
            "note": self.note,
            "prompt_i": self.prompt_i,
            "directive": self.directive,
            "honored": self.honored,
            "query": self.query,
            "candidates": self.candidates,
            "prompt_ii": self.prompt_ii,
            "selection": self.selection,
            "prompt_iii": self.prompt_iii,
            "verdict": self.verdict,
            "ys": self.ys,
            "responses": self.responses,
            "error": self.error,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegionRecord":
        kw = dict(d)
        kw["region"] = AmbiguityRegion.from_dict(d["region"])
        kw.setdefault("timings", {})
        return cls(**kw)


@dataclass
class CorrectionTrace:
    patch_id: str
    mode: str
    adapters: dict = field(default_factory=dict)
    regions: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def corrected_boxes(self) -> list[Bbox]:
        return [r.region.bbox for r in self.regions if r.applied in ("add", "subtract")]

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "patch_id": self.patch_id,
            "mode": self.mode,
            "adapters": self.adapters,
            "regions": [r.to_dict(include_timings) for r in self.regions],
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorrectionTrace":
        return cls(d["patch_id"], d["mode"], dict(d.get("adapters", {})),
                   [RegionRecord.from_dict(r) for r in d.get("regions", [])], dict(d.get("timings", {})))


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    patch_id: str
    base_mask: np.ndarray
    confidence: np.ndarray
    final_mask: np.ndarray
    trace: CorrectionTrace


def changed_outside_corrections(result: SegmentationResult) -> int:
    """Number of pixels that differ from the base mask outside every corrected box."""
    inside = np.zeros(result.base_mask.shape, dtype=bool)
    for box in result.trace.corrected_boxes():
        inside[box.slices] = True
    return int(np.count_nonzero((result.final_mask != result.base_mask) & ~inside))


def mask_digest(mask: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(mask, dtype=np.uint8).tobytes()).hexdigest()[:16]


class _Stopwatch:
    def __init__(self, sink: dict, clock: Callable[[], float]):
        self.sink = sink
        self.clock = clock

    def __call__(self, stage: str):
        return _Lap(self, stage)


class _Lap:
    def __init__(self, watch: _Stopwatch, stage: str):
        self.watch, self.stage = watch, stage

    def __enter__(self):
        self.t0 = self.watch.clock()

    def __exit__(self, *exc):
        dt = self.watch.clock() - self.t0
        self.watch.sink[self.stage] = self.watch.sink.get(self.stage, 0.0) + dt
        return False


# ---------------------------------------------------------------------------
# one patch


def _box_in_candidate(patch: Patch, box: Bbox, cand: CandidateImage) -> Bbox:
    geo_box = patch.geo.box_to_geo(box)
    u, v = cand.geo.geo_to_pixel(np.array([geo_box.west, geo_box.east]),
                                 np.array([geo_box.north, geo_box.south]))
    h, w = cand.pixels.shape[:2]
    x0 = min(max(int(math.floor(min(u) + 1e-6)), 0), w - 1)
    y0 = min(max(int(math.floor(min(v) + 1e-6)), 0), h - 1)
    x1 = max(min(int(math.ceil(max(u) - 1e-6)), w), x0 + 1)
    y1 = max(min(int(math.ceil(max(v) - 1e-6)), h), y0 + 1)
    return Bbox(x0, y0, x1, y1)


class _PatchRun:
    def __init__(self, patch: Patch, config: PipelineConfig, adapters: Adapters, db,
                 clock: Callable[[], float]):
        self.patch = patch
        self.config = config
        self.adapters = adapters
        self.db = db
        self.clock = clock

    def _ask(self, stage: str, rec: RegionRecord, images, prompt: str, parse):
        params = {"stage": stage, "region_id": rec.region.region_id, "patch_id": self.patch.patch_id}
        text_prompt = prompt
        for attempt in range(1, self.config.parse_retries + 2):
            text = self.adapters.rqm.complete(images, text_prompt, params)
            rec.responses.append({"stage": stage, "attempt": attempt, "text": text})
            try:
                return parse(text)
            except ParseError as exc:
                rec.responses[-1]["parse_error"] = f"{type(exc).__name__}: {exc}"
                if attempt > self.config.parse_retries:
                    raise
                text_prompt = with_format_reminder(prompt, stage)

    def region(self, region: AmbiguityRegion, current: np.ndarray) -> tuple[RegionRecord, np.ndarray]:
        rec = RegionRecord(region)
        lap = _Stopwatch(rec.timings, self.clock)
        cfg = self.config
        if cfg.mode == "no-query":
            rec.note = "mode no-query: reasoning query disabled"
            return rec, current
        try:
            annotated = annotate_with_box(self.patch.image, region.bbox, cfg.stroke_px)
            with lap("attribution"):
                rec.prompt_i = render_prompt_i(region, self.patch.meta)
                directive: QueryDirective = self._ask(
                    "directive", rec, [annotated], rec.prompt_i,
                    lambda t: parse_directive(t, region.region_id))
            rec.directive = directive.to_dict()
            if not cfg.honors(directive.kind):
                rec.note = f"{directive.kind} directive not honored in mode {cfg.mode}"
                return rec, current
            rec.honored = True

            with lap("query"):
                province = None
                if self.patch.country and self.patch.province:
                    province = (self.patch.country, self.patch.province)
                spec = QuerySpec(
                    kind=directive.kind,
                    geo_bbox=self.patch.geo.box_to_geo(region.bbox),
                    exclude_season=self.patch.season if directive.kind == "temporal" else None,
                    enlarge_scale=cfg.enlarge_scale,
                    requested_patch_px=cfg.patch_px,
                    province=province,
                )
                rec.query = spec.to_json()
                cands = self.db.query(spec)
            rec.candidates = [c.meta() for c in cands]
            if not cands:
                rec.note = "no auxiliary candidates found"
                return rec, current

            with lap("attribution"):
                if len(cands) == 1:
                    sel = SelectionResult(1, "single candidate; selection not needed")
                    rec.selection = dict(sel.to_dict(), skipped=True)
                else:
                    rec.prompt_ii = render_prompt_ii(cands, directive.kind)
                    offered = list(range(1, len(cands) + 1))
                    sel = self._ask("selection", rec, [annotated] + [c.pixels for c in cands],
                                    rec.prompt_ii, lambda t: parse_selection(t, offered))
                    rec.selection = dict(sel.to_dict(), skipped=False)
            chosen = cands[sel.chosen_candidate_id - 1]
            rec.selection["candidate_id"] = chosen.candidate_id
            box_prompt = _box_in_candidate(self.patch, region.bbox, chosen)

            with lap("decision"):
                rec.prompt_iii = render_prompt_iii(directive.kind)
                aux_annotated = annotate_with_box(chosen.pixels, box_prompt, cfg.stroke_px)
                verdict: Verdict = self._ask("verdict", rec, [annotated, aux_annotated],
                                             rec.prompt_iii, parse_verdict)
            rec.verdict = verdict.to_dict()

            with lap("dynamic_correction"):
                ys_aux, _ = self.adapters.refiner.segment(chosen.pixels, box_prompt)
                ys_aux = as_binary(ys_aux)
                if ys_aux.shape != chosen.pixels.shape[:2]:
                    raise RasterError(f"refiner mask shape {ys_aux.shape} != image {chosen.pixels.shape[:2]}")
                ys = register_mask(ys_aux, chosen.geo, self.patch.geo, self.patch.shape, region.bbox)
                if verdict.value == "yes":
                    updated = clamp_binary(mask_add(current, ys))
                    rec.applied = "add"
                else:
                    updated = clamp_binary(mask_subtract(current, ys))
                    rec.applied = "subtract"
            rec.ys = {
                "candidate_id": chosen.candidate_id,
                "source_scene_id": chosen.source_scene_id,
                "box_prompt": box_prompt.as_list(),
                "registered_pixels": int(ys.sum()),
                "digest": mask_digest(ys),
                "changed_pixels": int(np.count_nonzero(updated != current)),
            }
            return rec, updated
        except REGION_FAILURES as exc:
            rec.applied = "skip"
            rec.error = {"type": type(exc).__name__, "message": str(exc)}
            rec.note = "region skipped after failure"
            log.warning("patch %s region %d skipped: %s", self.patch.patch_id, region.region_id, exc)
            return rec, current


def run_patch(patch: Patch, config: PipelineConfig, adapters: Adapters, db,
              clock: Callable[[], float] = time.perf_counter) -> SegmentationResult:
    """Refine one patch. Region-level failures are traced and skipped."""
    image = as_image(patch.image)
    trace = CorrectionTrace(patch.patch_id, config.mode, adapters.identities())
    t0 = clock()
    if patch.base_mask is not None and patch.base_confidence is not None:
        base, conf = as_binary(patch.base_mask), as_confidence(patch.base_confidence)
    else:
        base, conf = adapters.segmenter.segment(image)
        base, conf = as_binary(base), as_confidence(conf)
    if base.shape != patch.shape or conf.shape != patch.shape:
        raise RasterError(f"{patch.patch_id}: segmenter output shape does not match the image")
    regions = select_ambiguous_regions(conf, config.ambiguity, patch.patch_id)
    trace.timings["basic_perception"] = clock() - t0

    run = _PatchRun(patch, config, adapters, db, clock)
    current = base.copy()
    for region in regions:
        rec, current = run.region(region, current)
        trace.regions.append(rec)
        for k, v in rec.timings.items():
            trace.timings[k] = trace.timings.get(k, 0.0) + v
    for stage in STAGES:
        trace.timings.setdefault(stage, 0.0)
    return SegmentationResult(patch.patch_id, base, conf, current, trace)


# ---------------------------------------------------------------------------
# datasets


def load_patch(image_path) -> Patch:
    """Patch ``<id>.png`` with ``<id>.geo.json`` and optional ``<id>.meta.json``.

    A precomputed base segmentation is used when ``<id>.base.png`` and
    ``<id>.conf.f32`` sit next to the image.
    """
    p = Path(image_path)
    meta = read_json(meta_sidecar_path(p)) if meta_sidecar_path(p).exists() else {}
    base_p, conf_p = p.with_name(p.stem + ".base.png"), p.with_name(p.stem + ".conf.f32")
    base = conf = None
    if base_p.exists() and conf_p.exists():
        base, conf = read_mask(base_p), read_confidence(conf_p)
    return Patch(
        patch_id=meta.get("patch_id", p.stem),
        image=read_image(p),
        geo=read_geo(p),
        season=meta.get("season"),
        country=meta.get("country"),
        province=meta.get("province"),
        group=meta.get("group"),
        base_mask=base,
        base_confidence=conf,
    )


def list_patch_files(patch_dir) -> list[Path]:
    return sorted(p for p in Path(patch_dir).glob("*.png") if not p.name.endswith(".base.png"))


@dataclass
class DatasetResult:
    patch_ids: list
    results: dict
    failures: dict
    report: dict | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def run_dataset(patches: Sequence[Patch], config: PipelineConfig, adapters: Adapters, db,
                ground_truth: Mapping[str, np.ndarray] | None = None,
                workers: int | None = None) -> DatasetResult:
    """Run every patch through :func:`run_patch` on a bounded thread pool.

    Results come back in input order; a failing patch is recorded and does
    not affect the others.  With ``ground_truth`` (patch_id -> mask) an
    aggregate metrics report grouped by ``Patch.group`` is attached.
    """
    workers = workers or config.workers

    def one(patch: Patch):
        try:
            return run_patch(patch, config, adapters, db), None
        except Exception as exc:  # isolate per patch
            log.error("patch %s failed: %s", patch.patch_id, exc)
            return None, f"{type(exc).__name__}: {exc}"

    if workers == 1:
        outcomes = [one(p) for p in patches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, patches))

    results, failures = {}, {}
    for patch, (res, err) in zip(patches, outcomes):
        if err is None:
            results[patch.patch_id] = res
        else:
            failures[patch.patch_id] = err

    report = None
    if ground_truth is not None:
        rows: list[tuple[str, str, ConfusionCounts]] = []
        for patch in patches:
            res = results.get(patch.patch_id)
            gt = ground_truth.get(patch.patch_id)
            if res is None or gt is None:
                continue
            rows.append((patch.patch_id, patch.group or patch.province or "all",
                         confusion(res.final_mask, gt)))
        report = aggregate(rows)
    return DatasetResult([p.patch_id for p in patches], results, failures, report)


def save_result(out_dir, result: SegmentationResult) -> dict:
    out = Path(out_dir)
    paths = {
        "final_mask": out / "masks" / f"{result.patch_id}.png",
        "base_mask": out / "masks" / "base" / f"{result.patch_id}.png",
        "trace": out / "traces" / f"{result.patch_id}.json",
    }
    write_mask(paths["final_mask"], result.final_mask)
    write_mask(paths["base_mask"], result.base_mask)
    write_json(paths["trace"], result.trace.to_dict())
    return {k: str(v) for k, v in paths.items()}
