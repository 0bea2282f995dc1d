"""Small builders shared by test modules."""
import json

import numpy as np

from farmmind.adapters import scripted_adapters
from farmmind.pipeline import PipelineConfig, load_patch, run_patch

from conftest import GOLDEN, GOLDEN_RUNS


def golden_script(name):
    return json.loads((GOLDEN / f"{name}.json").read_text())


def run_golden(world, db, patch_id, config=None, script=None):
    patch = load_patch(world.patch_dir / f"{patch_id}.png")
    adapters = scripted_adapters(script or golden_script(GOLDEN_RUNS[patch_id]))
    return run_patch(patch, config or PipelineConfig(), adapters, db)


def canonical_trace(result):
    return json.dumps(result.trace.to_dict(include_timings=False), sort_keys=True, indent=2) + "\n"


def random_mask(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)


# fixed inputs for the rendered-prompt snapshots in golden/prompts
SNAPSHOT_REGION = {"region_id": 1, "bbox": [196, 130, 256, 250], "bbox_area": 7200, "pixel_count": 7200,
                   "source_patch_id": "p-enlarge"}
SNAPSHOT_PATCH_META = {"patch_id": "p-enlarge", "width": 256, "height": 256, "season": "summer"}
SNAPSHOT_CANDIDATES = [
    {"season": "spring", "acquisition_tag": "2023-04-12", "source_scene_id": "henan-spring"},
    {"season": "autumn", "acquisition_tag": "2023-10-08", "source_scene_id": "henan-autumn"},
    {"season": "winter", "acquisition_tag": "2024-01-15", "source_scene_id": "henan-winter"},
]


def rendered_prompts():
    """name -> text for every template, rendered from the fixed snapshot inputs."""
    from farmmind.ambiguity import AmbiguityRegion
    from farmmind.protocol import render_prompt_i, render_prompt_ii, render_prompt_iii

    out = {"prompt_i": render_prompt_i(AmbiguityRegion.from_dict(SNAPSHOT_REGION), SNAPSHOT_PATCH_META)}
    for kind in ("temporal", "enlarge"):
        out[f"prompt_ii_{kind}"] = render_prompt_ii(SNAPSHOT_CANDIDATES, kind)
        out[f"prompt_iii_{kind}"] = render_prompt_iii(kind)
    return out


class RandomRqm:
    """Reproducible random replies, including malformed ones.

    The reply depends only on (seed, patch, region, stage, call number), so
    serial and parallel runs see identical conversations.
    """

    name = "random-rqm"

    def __init__(self, seed):
        import threading
        self.seed = seed
        self._n = {}
        self._lock = threading.Lock()

    def complete(self, images, prompt, params=None):
        import random
        key = (params["patch_id"], params["region_id"], params["stage"])
        with self._lock:
            n = self._n[key] = self._n.get(key, 0) + 1
        rng = random.Random(f"{self.seed}/{key}/{n}")
        stage = params["stage"]
        if rng.random() < 0.15:
            return "I am not sure what you mean."
        if stage == "directive":
            return "Reason.\nDIRECTIVE: " + rng.choice(["<reg-1>", "<reg-2>"])
        if stage == "selection":
            return f"SELECTED: {rng.randint(1, 4)}"
        return "ANSWER: " + rng.choice(["yes", "no"])


class RecordingRefiner:
    """Wraps a refiner and keeps every mask it returns."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.outputs = []

    def segment(self, image, box=None):
        mask, conf = self.inner.segment(image, box)
        self.outputs.append(mask.copy())
        return mask, conf


def random_patches(n, seed, size=256):
    """Summer-scene windows at random offsets, georeferenced like the demo patches."""
    from farmmind.pipeline import Patch
    from farmmind.raster import GeoTransform
    from farmmind.synthetic import COUNTRY, PROVINCE, PX_DEG, SCENE_PX, render_scene, scene_geo

    rng = np.random.default_rng(seed)
    scene = render_scene("summer")
    g = scene_geo()
    out = []
    for i in range(n):
        x, y = (int(v) for v in rng.integers(0, SCENE_PX - size + 1, 2))
        lon, lat = g.pixel_to_geo(x, y)
        out.append(Patch(f"r{seed}-{i}", scene[y:y + size, x:x + size].copy(),
                         GeoTransform(float(lon), float(lat), PX_DEG, -PX_DEG),
                         season="summer", country=COUNTRY, province=PROVINCE, group=f"g{i % 2}"))
    return out
