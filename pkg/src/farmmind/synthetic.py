"""Deterministic synthetic scenes, patches and catalogs for tests and demos.

The demo world is one 768x768 scene footprint imaged in four seasons.  The
summer image contains two kinds of hard cases that the green-threshold stub
segmenter scores inside ``[-1, 1]``:

* edge fields: real farmland, dull in summer, cut by a patch border
  (resolved by an enlarged view, verdict yes)
* L-shaped plots: non-farmland that looks faintly green in summer
  (resolved by the winter image, verdict no)

Three patches are cut from the summer image: ``p-enlarge`` (one edge field),
``p-temporal`` (one L plot) and ``p-two`` (one of each).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagedb import SEASONS, SceneDB
from .io import write_geo, write_image, write_json, write_mask
from .raster import Bbox, GeoTransform

PX_DEG = 1e-4
ORIGIN = (113.0, 34.0)
SCENE_PX = 768
PATCH_PX = 256
COUNTRY, PROVINCE = "China", "Henan"

BACKGROUND = (95, 60, 50)
FIELD = {"spring": (60, 170, 60), "summer": (40, 200, 40), "autumn": (180, 160, 60), "winter": (150, 110, 70)}
EDGE_FIELD = {"spring": (70, 150, 60), "summer": (110, 124, 60), "autumn": (175, 150, 80), "winter": (150, 110, 70)}
L_PLOT = {"spring": (125, 120, 110), "summer": (120, 132, 100), "autumn": (130, 120, 110), "winter": (200, 200, 200)}
ACQUIRED = {"spring": "2023-04-12", "summer": "2023-07-20", "autumn": "2023-10-08", "winter": "2024-01-15"}
ENLARGE_SEASONS = ("summer", "autumn")

# scene pixel boxes as (x_min, y_min, x_max, y_max)
FIELDS = [
    (20, 20, 200, 110), (300, 20, 420, 100), (40, 520, 240, 700),
    (600, 600, 740, 740), (300, 560, 440, 700), (20, 280, 80, 500),
]
EDGE_FIELDS = [(452, 130, 560, 250), (452, 300, 560, 420)]
L_PLOTS = [(90, 336, 170, 416), (330, 336, 410, 416)]

PATCH_WINDOWS = {
    "p-enlarge": (256, 0),
    "p-temporal": (0, 256),
    "p-two": (256, 256),
}


def scene_geo() -> GeoTransform:
    return GeoTransform(ORIGIN[0], ORIGIN[1], PX_DEG, -PX_DEG)


def _fill(img, box, color):
    x0, y0, x1, y1 = box
    img[y0:y1, x0:x1] = color


def _l_masks(box):
    """(L-shaped plot mask, confident corner mask) over the scene grid for one L box."""
    x0, y0, x1, y1 = box
    l_shape = np.zeros((SCENE_PX, SCENE_PX), dtype=bool)
    l_shape[y0:y1, x0:x1] = True
    corner = np.zeros_like(l_shape)
    corner[y0:(y0 + y1) // 2, (x0 + x1) // 2:x1] = True
    return l_shape & ~corner, corner


def render_scene(season: str) -> np.ndarray:
    img = np.empty((SCENE_PX, SCENE_PX, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for box in FIELDS:
        _fill(img, box, FIELD[season])
    for box in EDGE_FIELDS:
        _fill(img, box, EDGE_FIELD[season])
    for box in L_PLOTS:
        l_shape, corner = _l_masks(box)
        img[l_shape] = L_PLOT[season]
        img[corner] = FIELD[season]
    return img


def truth_mask() -> np.ndarray:
    """Farmland ground truth over the scene grid (season independent)."""
    gt = np.zeros((SCENE_PX, SCENE_PX), dtype=np.uint8)
    for box in FIELDS + EDGE_FIELDS:
        _fill(gt, box, 1)
    for box in L_PLOTS:
        _, corner = _l_masks(box)
        gt[corner] = 1
    return gt


def patch_window(patch_id: str) -> Bbox:
    x, y = PATCH_WINDOWS[patch_id]
    return Bbox(x, y, x + PATCH_PX, y + PATCH_PX)


def patch_geo(patch_id: str) -> GeoTransform:
    win = patch_window(patch_id)
    g = scene_geo()
    lon, lat = g.pixel_to_geo(win.x_min, win.y_min)
    return GeoTransform(float(lon), float(lat), PX_DEG, -PX_DEG)


@dataclass
class DemoWorld:
    root: Path
    catalog_dir: Path
    patch_dir: Path
    gt_dir: Path
    scene_paths: dict

    def open_db(self) -> SceneDB:
        return SceneDB(self.catalog_dir)


def build_demo_world(root, patch_ids=tuple(PATCH_WINDOWS)) -> DemoWorld:
    """Write scenes, catalog, patches and ground truth under ``root``."""
    root = Path(root)
    scenes_dir, catalog_dir = root / "scenes", root / "catalog"
    patch_dir, gt_dir = root / "patches", root / "gt"
    db = SceneDB(catalog_dir)
    scene_paths = {}
    images = {}
    for season in SEASONS:
        img = render_scene(season)
        images[season] = img
        path = scenes_dir / f"henan-{season}.png"
        write_image(path, img)
        write_geo(path, scene_geo())
        types = ["multi-temporal"] + (["enlarge"] if season in ENLARGE_SEASONS else [])
        meta = {"scene_id": f"henan-{season}", "data_types": types,
                "admin_region": {"country": COUNTRY, "province": PROVINCE},
                "season": season, "acquisition_tag": ACQUIRED[season]}
        write_json(path.with_name(path.stem + ".meta.json"), meta)
        db.ingest_scene(path, meta)
        scene_paths[season] = path
    gt = truth_mask()
    for pid in patch_ids:
        win = patch_window(pid)
        img_path = patch_dir / f"{pid}.png"
        write_image(img_path, images["summer"][win.slices])
        write_geo(img_path, patch_geo(pid))
        write_json(patch_dir / f"{pid}.meta.json",
                   {"patch_id": pid, "season": "summer", "country": COUNTRY,
                    "province": PROVINCE, "group": PROVINCE})
        write_mask(gt_dir / f"{pid}.png", gt[win.slices])
    return DemoWorld(root, catalog_dir, patch_dir, gt_dir, scene_paths)


# ---------------------------------------------------------------------------
# randomized catalog for index tests

PROVINCE_AREAS = {
    ("China", "Anhui"): (116.0, 31.0, 117.0, 32.0),
    ("China", "Hebei"): (116.5, 31.5, 117.5, 32.5),
    ("China", "Yunnan"): (102.0, 24.0, 103.0, 25.0),
}


def build_random_catalog(root, seed: int = 0, scene_px: int = 48) -> SceneDB:
    """12 small scenes: 3 provinces x 4 seasons, random footprints and data types.

    Anhui and Hebei overlap geographically on purpose.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    db = SceneDB(root / "catalog")
    for (country, province), (w, s, e, n) in PROVINCE_AREAS.items():
        for season in SEASONS:
            px = float(rng.uniform(0.004, 0.012))
            span = px * scene_px
            lon0 = float(rng.uniform(w, e - span))
            lat0 = float(rng.uniform(s + span, n))
            sid = f"{province.lower()}-{season}"
            path = root / "scenes" / f"{sid}.png"
            write_image(path, rng.integers(0, 256, (scene_px, scene_px, 3), dtype=np.uint8))
            write_geo(path, GeoTransform(lon0, lat0, px, -px))
            types = [["multi-temporal"], ["enlarge"], ["multi-temporal", "enlarge"]][int(rng.integers(3))]
            db.ingest_scene(path, {"scene_id": sid, "data_types": types,
                                   "admin_region": {"country": country, "province": province},
                                   "season": season, "acquisition_tag": f"20{int(rng.integers(18, 25))}"})
    return db
