"""Geo-indexed store of wide-swath scenes serving temporal and enlarge crops.

The catalog is an append-only JSON-lines file (one scene record per line)
next to which the scene PNGs and their ``.geo.json`` sidecars live.  The
in-memory index has two levels, data type then administrative region, and
every province bucket remembers the union of its scene footprints so whole
provinces can be skipped before the per-scene containment test.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable

import httpx
import numpy as np
from PIL import Image

from .io import image_from_b64, image_to_b64, read_geo, read_image
from .raster import GeoBox, GeoTransform, RasterError, sample_nearest

log = logging.getLogger(__name__)

SEASONS = ("spring", "summer", "autumn", "winter")
TEMPORAL = "multi-temporal"
ENLARGE = "enlarge"
DATA_TYPES = (TEMPORAL, ENLARGE)
KIND_TO_TYPE = {"temporal": TEMPORAL, "enlarge": ENLARGE}

CATALOG_NAME = "catalog.jsonl"


class CatalogError(Exception):
    pass


class DuplicateSceneError(CatalogError):
    pass


class QuerySpecError(ValueError):
    pass


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    data_types: frozenset
    country: str
    province: str
    season: str
    acquisition_tag: str
    geo: GeoTransform
    width: int
    height: int
    storage_path: str

    def __post_init__(self):
        object.__setattr__(self, "data_types", frozenset(self.data_types))
        if not self.scene_id:
            raise CatalogError("scene_id must be non-empty")
        if not self.data_types or not self.data_types <= set(DATA_TYPES):
            raise CatalogError(f"{self.scene_id}: data_types must be a non-empty subset of {DATA_TYPES}")
        if not self.country or not self.province:
            raise CatalogError(f"{self.scene_id}: admin region (country, province) must be non-empty")
        if self.season not in SEASONS:
            raise CatalogError(f"{self.scene_id}: unknown season {self.season!r}")
        if self.width <= 0 or self.height <= 0:
            raise CatalogError(f"{self.scene_id}: degenerate dims {self.width}x{self.height}")

    @property
    def admin_region(self) -> tuple[str, str]:
        return self.country, self.province

    @property
    def footprint(self) -> GeoBox:
        return self.geo.footprint(self.width, self.height)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "data_types": sorted(self.data_types),
            "admin_region": {"country": self.country, "province": self.province},
            "season": self.season,
            "acquisition_tag": self.acquisition_tag,
            "geo": self.geo.to_json(),
            "width": self.width,
            "height": self.height,
            "storage_path": self.storage_path,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        admin = d["admin_region"]
        return cls(
            scene_id=d["scene_id"],
            data_types=frozenset(d["data_types"]),
            country=admin["country"],
            province=admin["province"],
            season=d["season"],
            acquisition_tag=str(d.get("acquisition_tag", "")),
            geo=GeoTransform.from_json(d["geo"]),
            width=int(d["width"]),
            height=int(d["height"]),
            storage_path=d["storage_path"],
        )


@dataclass(frozen=True)
class QuerySpec:
    kind: str
    geo_bbox: GeoBox
    exclude_season: str | None = None
    enlarge_scale: float = 3.0
    requested_patch_px: int = 512
    province: tuple[str, str] | None = None

    def __post_init__(self):
        if self.kind not in KIND_TO_TYPE:
            raise QuerySpecError(f"kind must be 'temporal' or 'enlarge', got {self.kind!r}")
        if not isinstance(self.geo_bbox, GeoBox):
            raise QuerySpecError("geo_bbox must be a GeoBox")
        if self.exclude_season is not None and self.exclude_season not in SEASONS:
            raise QuerySpecError(f"unknown season {self.exclude_season!r}")
        if not (self.enlarge_scale > 1):
            raise QuerySpecError(f"enlarge_scale must be > 1, got {self.enlarge_scale}")
        if int(self.requested_patch_px) <= 0:
            raise QuerySpecError("requested_patch_px must be positive")
        if self.province is not None:
            object.__setattr__(self, "province", tuple(self.province))

    @property
    def target_footprint(self) -> GeoBox:
        if self.kind == "enlarge":
            return self.geo_bbox.scaled(self.enlarge_scale)
        return self.geo_bbox

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "geo_bbox": self.geo_bbox.as_list(),
            "exclude_season": self.exclude_season,
            "enlarge_scale": self.enlarge_scale,
            "requested_patch_px": self.requested_patch_px,
            "province": list(self.province) if self.province else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuerySpec":
        try:
            return cls(
                kind=d["kind"],
                geo_bbox=GeoBox.from_list(d["geo_bbox"]),
                exclude_season=d.get("exclude_season"),
                enlarge_scale=float(d.get("enlarge_scale", 3.0)),
                requested_patch_px=int(d.get("requested_patch_px", 512)),
                province=tuple(d["province"]) if d.get("province") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise QuerySpecError(f"malformed query spec: {exc}") from exc


@dataclass(frozen=True, eq=False)
class CandidateImage:
    candidate_id: str
    pixels: np.ndarray
    geo: GeoTransform
    season: str
    source_scene_id: str
    footprint: GeoBox
    acquisition_tag: str = ""

    def meta(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "season": self.season,
            "source_scene_id": self.source_scene_id,
            "acquisition_tag": self.acquisition_tag,
            "footprint": self.footprint.as_list(),
            "geo": self.geo.to_json(),
            "width": int(self.pixels.shape[1]),
            "height": int(self.pixels.shape[0]),
        }


def _out_shape(out_px) -> tuple[int, int]:
    if isinstance(out_px, (tuple, list)):
        w, h = out_px
    else:
        w = h = out_px
    w, h = int(w), int(h)
    if w <= 0 or h <= 0:
        raise ValueError("output size must be positive")
    return h, w


def crop_by_geo(pixels: np.ndarray, geo: GeoTransform, geo_bbox: GeoBox, out_px,
                *, scene_id: str = "", season: str = "", acquisition_tag: str = "") -> CandidateImage:
    """Nearest-neighbour sample of ``geo_bbox`` onto an ``out_px`` grid (int or ``(w, h)``)."""
    h, w = _out_shape(out_px)
    fp = geo.footprint(pixels.shape[1], pixels.shape[0])
    tol = 1e-6 * min(abs(geo.pixel_width_deg), abs(geo.pixel_height_deg))
    if not fp.contains(geo_bbox, tol):
        raise RasterError(f"geo box {geo_bbox.as_list()} exceeds scene footprint {fp.as_list()}")
    out_geo = geo.for_box(geo_bbox, w, h)
    out = sample_nearest(pixels, geo, out_geo, (h, w), fill=0)
    cid = "{}@{:.9f},{:.9f},{:.9f},{:.9f}".format(scene_id, *geo_bbox.as_list())
    return CandidateImage(cid, out, out_geo, season, scene_id, geo_bbox, acquisition_tag)


def season_rank(season: str) -> int:
    return SEASONS.index(season)


def _matches(rec: SceneRecord, spec: QuerySpec) -> bool:
    if KIND_TO_TYPE[spec.kind] not in rec.data_types:
        return False
    if spec.province is not None and rec.admin_region != spec.province:
        return False
    if spec.kind == "temporal" and rec.season == spec.exclude_season:
        return False
    return _covers(rec, spec.target_footprint)


def _covers(rec: SceneRecord, box: GeoBox) -> bool:
    tol = 1e-6 * min(abs(rec.geo.pixel_width_deg), abs(rec.geo.pixel_height_deg))
    return rec.footprint.contains(box, tol)


def select_candidates(records: Iterable[SceneRecord], spec: QuerySpec) -> list[SceneRecord]:
    """Final ordering step shared by indexed and scanned lookups.

    Temporal queries keep the most recent acquisition per season.
    """
    recs = list(records)
    if spec.kind == "temporal":
        best: dict[str, SceneRecord] = {}
        for r in recs:
            cur = best.get(r.season)
            if cur is None or (r.acquisition_tag, r.scene_id) > (cur.acquisition_tag, cur.scene_id):
                best[r.season] = r
        recs = list(best.values())
    return sorted(recs, key=lambda r: (season_rank(r.season), r.scene_id))


@dataclass
class _IndexState:
    records: dict = field(default_factory=dict)
    # data type -> (country, province) -> tuple of records
    buckets: dict = field(default_factory=dict)
    # (data type, (country, province)) -> union footprint
    extents: dict = field(default_factory=dict)


def _build_state(records: dict) -> _IndexState:
    buckets: dict = {t: {} for t in DATA_TYPES}
    extents: dict = {}
    for rec in sorted(records.values(), key=lambda r: r.scene_id):
        for t in rec.data_types:
            buckets[t].setdefault(rec.admin_region, []).append(rec)
            fp = rec.footprint
            prev = extents.get((t, rec.admin_region))
            extents[(t, rec.admin_region)] = fp if prev is None else GeoBox(
                min(prev.west, fp.west), min(prev.south, fp.south),
                max(prev.east, fp.east), max(prev.north, fp.north))
    frozen = {t: {k: tuple(v) for k, v in b.items()} for t, b in buckets.items()}
    return _IndexState(dict(records), frozen, extents)


class SceneDB:
    """Scene catalog plus hierarchical index.

    Readers work on an immutable snapshot of the index, so a concurrent
    ingest is either fully visible to a query or not at all.
    """

    def __init__(self, catalog_dir):
        self.catalog_dir = Path(catalog_dir)
        self.catalog_path = self.catalog_dir / CATALOG_NAME
        self._write_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self._pixels: dict[str, np.ndarray] = {}
        records = {}
        if self.catalog_path.exists():
            with open(self.catalog_path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = SceneRecord.from_json(json.loads(line))
                    except (KeyError, ValueError, CatalogError) as exc:
                        raise CatalogError(f"{self.catalog_path}:{lineno}: {exc}") from exc
                    records[rec.scene_id] = rec
        self._state = _build_state(records)

    # -- catalog -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._state.records)

    @property
    def records(self) -> list[SceneRecord]:
        return sorted(self._state.records.values(), key=lambda r: r.scene_id)

    def get(self, scene_id: str) -> SceneRecord:
        return self._state.records[scene_id]

    def buckets(self, data_type: str) -> dict:
        """Province-level buckets for one data type: ``{(country, province): records}``."""
        return dict(self._state.buckets.get(data_type, {}))

    def _storage_ref(self, image_path: Path) -> str:
        p = image_path.resolve()
        try:
            return str(p.relative_to(self.catalog_dir.resolve()))
        except ValueError:
            return str(p)

    def resolve_path(self, rec: SceneRecord) -> Path:
        p = Path(rec.storage_path)
        return p if p.is_absolute() else self.catalog_dir / p

    def ingest_scene(self, image_path, metadata: dict) -> str:
        image_path = Path(image_path)
        if not image_path.exists():
            raise FileNotFoundError(image_path)
        geo = read_geo(image_path)
        with Image.open(image_path) as im:
            width, height = im.size
        admin = metadata.get("admin_region") or {}
        rec = SceneRecord(
            scene_id=str(metadata["scene_id"]),
            data_types=frozenset(metadata["data_types"]),
            country=admin.get("country", metadata.get("country", "")),
            province=admin.get("province", metadata.get("province", "")),
            season=metadata["season"],
            acquisition_tag=str(metadata.get("acquisition_tag", "")),
            geo=geo,
            width=width,
            height=height,
            storage_path=self._storage_ref(image_path),
        )
        with self._write_lock:
            existing = self._state.records.get(rec.scene_id)
            if existing is not None:
                if existing == rec:
                    return rec.scene_id
                raise DuplicateSceneError(f"scene {rec.scene_id!r} already ingested with different metadata")
            self.catalog_dir.mkdir(parents=True, exist_ok=True)
            with open(self.catalog_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            records = dict(self._state.records)
            records[rec.scene_id] = rec
            self._state = _build_state(records)
        log.info("ingested scene %s (%s, %s)", rec.scene_id, rec.province, rec.season)
        return rec.scene_id

    # -- queries -------------------------------------------------------------

    def lookup(self, spec: QuerySpec) -> list[SceneRecord]:
        """Scenes answering ``spec``: data type, then province, then coordinates."""
        state = self._state
        target = spec.target_footprint
        buckets = state.buckets.get(KIND_TO_TYPE[spec.kind], {})
        if spec.province is not None:
            provinces = [spec.province] if spec.province in buckets else []
        else:
            provinces = sorted(buckets)
        hits = []
        for prov in provinces:
            extent = state.extents[(KIND_TO_TYPE[spec.kind], prov)]
            # loose tolerance: pruning only has to be conservative
            if not extent.contains(target, tol=1e-3):
                continue
            hits.extend(r for r in buckets[prov] if _matches(r, spec))
        return select_candidates(hits, spec)

    def scan(self, spec: QuerySpec) -> list[SceneRecord]:
        """Same as :meth:`lookup` but a linear pass over every record."""
        return select_candidates((r for r in self._state.records.values() if _matches(r, spec)), spec)

    def load_pixels(self, rec: SceneRecord) -> np.ndarray:
        with self._cache_lock:
            px = self._pixels.get(rec.scene_id)
        if px is None:
            px = read_image(self.resolve_path(rec))
            px.setflags(write=False)
            with self._cache_lock:
                self._pixels[rec.scene_id] = px
        return px

    def crop_by_geo(self, rec: SceneRecord, geo_bbox: GeoBox, out_px) -> CandidateImage:
        return crop_by_geo(self.load_pixels(rec), rec.geo, geo_bbox, out_px,
                           scene_id=rec.scene_id, season=rec.season,
                           acquisition_tag=rec.acquisition_tag)

    def query(self, spec: QuerySpec, use_index: bool = True) -> list[CandidateImage]:
        """Candidate crops for ``spec``; an empty list means nothing covers the area."""
        recs = self.lookup(spec) if use_index else self.scan(spec)
        return [self.crop_by_geo(r, spec.target_footprint, spec.requested_patch_px) for r in recs]


# ---------------------------------------------------------------------------
# HTTP surface


def candidate_to_wire(c: CandidateImage) -> dict:
    d = c.meta()
    d["png_b64"] = image_to_b64(c.pixels)
    return d


def candidate_from_wire(d: dict) -> CandidateImage:
    return CandidateImage(
        candidate_id=d["candidate_id"],
        pixels=image_from_b64(d["png_b64"]),
        geo=GeoTransform.from_json(d["geo"]),
        season=d["season"],
        source_scene_id=d["source_scene_id"],
        footprint=GeoBox.from_list(d["footprint"]),
        acquisition_tag=d.get("acquisition_tag", ""),
    )


def handle_query_request(db: SceneDB, body: bytes) -> tuple[int, dict]:
    try:
        spec = QuerySpec.from_json(json.loads(body))
    except (json.JSONDecodeError, QuerySpecError, RasterError, AttributeError) as exc:
        return 400, {"error": str(exc)}
    cands = db.query(spec)
    return 200, {"status": "ok" if cands else "empty",
                 "candidates": [candidate_to_wire(c) for c in cands]}


def make_query_server(db: SceneDB, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server answering ``POST /query``; call ``serve_forever`` to run it."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path != "/query":
                self._send(404, {"error": f"no route {self.path}"})
                return
            n = int(self.headers.get("Content-Length", 0))
            status, payload = handle_query_request(db, self.rfile.read(n))
            self._send(status, payload)

        def _send(self, status, payload):
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt, *args):
            log.debug("query server: " + fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)


class RemoteSceneDB:
    """Client for a query server; usable wherever a :class:`SceneDB` is queried."""

    def __init__(self, base_url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def query(self, spec: QuerySpec) -> list[CandidateImage]:
        resp = self._client.post("/query", json=spec.to_json())
        resp.raise_for_status()
        return [candidate_from_wire(d) for d in resp.json()["candidates"]]

    def close(self) -> None:
        self._client.close()

