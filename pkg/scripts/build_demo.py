"""Write the synthetic demo world (scenes, catalog, patches, ground truth).

    python3 scripts/build_demo.py demo/
    farmmind run --patches demo/patches --catalog demo/catalog --out demo/out \
        --mock-script tests/golden/two-region.json --gt demo/gt
"""
import argparse

from farmmind.synthetic import build_demo_world


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", help="output directory")
    args = ap.parse_args()
    world = build_demo_world(args.root)
    print(f"catalog:  {world.catalog_dir} ({len(world.open_db())} scenes)")
    print(f"patches:  {world.patch_dir}")
    print(f"truth:    {world.gt_dir}")


if __name__ == "__main__":
    main()
