"""Ablation over the four query modes on the demo world.

Replays the scripted replies for all demo patches under each mode and prints
micro-averaged metrics against the synthetic ground truth, next to the
unrefined base segmentation.

    python3 scripts/ablation.py [--random N --seed S]

With ``--random`` the scripted model is replaced by a reproducible random
one over N random windows, which shows how each mode behaves when the
model is unreliable.
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from farmmind.adapters import Adapters, BoxColorSegmenter, GreenThresholdSegmenter, scripted_adapters  # noqa: E402
from farmmind.io import read_mask  # noqa: E402
from farmmind.metrics import aggregate, confusion  # noqa: E402
from farmmind.pipeline import MODES, PipelineConfig, list_patch_files, load_patch, run_dataset  # noqa: E402
from farmmind.synthetic import ORIGIN, PX_DEG, build_demo_world, truth_mask  # noqa: E402

GOLDEN = ROOT / "tests" / "golden"


def merged_script() -> dict:
    """One script answering for every demo patch (keys are patch-qualified)."""
    merged = {"name": "demo", "rqm": {}}
    for name in ("supp-a-enlarge", "supp-a-temporal", "two-region"):
        s = json.loads((GOLDEN / f"{name}.json").read_text())
        merged["segmenter"], merged["refiner"] = s["segmenter"], s["refiner"]
        for stage, table in s["rqm"].items():
            merged["rqm"].setdefault(stage, {}).update(table)
    return merged


def row(name, rep):
    m = rep["overall"]["metrics"]
    cells = " ".join("   n/a" if m[k] is None else f"{100 * m[k]:6.2f}" for k in ("mAcc", "mIoU", "F1", "Recall"))
    return f"{name:<14} {cells}"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--random", type=int, default=0, help="use N random windows and a random model")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        world = build_demo_world(tmp)
        db = world.open_db()
        if args.random:
            from helpers import RandomRqm, random_patches
            patches = random_patches(args.random, seed=args.seed)
            gt_full = truth_mask()
            gt = {}
            for p in patches:
                x = round((p.geo.origin_lon - ORIGIN[0]) / PX_DEG)
                y = round((ORIGIN[1] - p.geo.origin_lat) / PX_DEG)
                gt[p.patch_id] = gt_full[y:y + p.shape[0], x:x + p.shape[1]]

            def make():
                return Adapters(RandomRqm(args.seed), GreenThresholdSegmenter(), BoxColorSegmenter())
        else:
            patches = [load_patch(f) for f in list_patch_files(world.patch_dir)]
            gt = {p.patch_id: read_mask(world.gt_dir / f"{p.patch_id}.png") for p in patches}
            script = merged_script()

            def make():
                return scripted_adapters(script)

        print(f"{'mode':<14} {'mAcc':>6} {'mIoU':>6} {'F1':>6} {'Recall':>6}")
        for i, mode in enumerate(MODES):
            out = run_dataset(patches, PipelineConfig(mode=mode), make(), db, ground_truth=gt)
            if i == 0:
                base = aggregate([(pid, "all", confusion(r.base_mask, gt[pid])) for pid, r in out.results.items()])
                print(row("base", base))
            print(row(mode, out.report))


if __name__ == "__main__":
    main()
