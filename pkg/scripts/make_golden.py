"""Regenerate the checked-in golden outputs under tests/golden.

Writes, for every scripted demo patch, the final mask PNG and the trace JSON
(timings excluded), plus the rendered prompt snapshots.  Review the diff
before committing: a change here is a behaviour change.

    python3 scripts/make_golden.py
"""
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from conftest import GOLDEN, GOLDEN_RUNS  # noqa: E402
from helpers import canonical_trace, rendered_prompts, run_golden  # noqa: E402

from farmmind.io import write_mask  # noqa: E402
from farmmind.synthetic import build_demo_world  # noqa: E402


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        world = build_demo_world(tmp)
        db = world.open_db()
        for pid in GOLDEN_RUNS:
            res = run_golden(world, db, pid)
            write_mask(GOLDEN / f"{pid}.final.png", res.final_mask)
            (GOLDEN / f"{pid}.trace.json").write_text(canonical_trace(res))
            outcome = ", ".join(r.applied for r in res.trace.regions)
            print(f"{pid}: {outcome}")
    prompt_dir = GOLDEN / "prompts"
    prompt_dir.mkdir(exist_ok=True)
    for name, text in rendered_prompts().items():
        (prompt_dir / f"{name}.txt").write_text(text)
        print(f"prompts/{name}.txt")


if __name__ == "__main__":
    main()
