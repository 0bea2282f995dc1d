"""Command-line entry point: ``farmmind {ingest,run,eval,trace,serve-db}``.

Exit codes: 0 success, 2 configuration or usage error, 3 some patches failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adapters import load_script, scripted_adapters
from .config import build_http_adapters, load_config
from .imagedb import CatalogError, SceneDB, make_query_server
from .io import meta_sidecar_path, read_json, read_mask, write_json
from .metrics import aggregate, confusion, report_csv
from .pipeline import MODES, ConfigError, CorrectionTrace, list_patch_files, load_patch, run_dataset, save_result

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

log = logging.getLogger("farmmind")


@dataclass
class RunManifest:
    config_path: str | None
    mode: str
    dataset: list
    catalog: str
    adapters: dict
    output_dir: str
    timestamp: str
    mock_script: dict | None = None
    config: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    metrics: dict | None = None
    version: str = __version__


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _collect_patches(paths) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(list_patch_files(p))
        elif p.exists():
            files.append(p)
        else:
            raise ConfigError(f"patch path does not exist: {p}")
    return files


def cmd_ingest(args) -> int:
    if args.meta and len(args.scenes) != 1:
        raise ConfigError("--meta can only be used with a single scene")
    db = SceneDB(args.catalog)
    for scene in args.scenes:
        meta_path = Path(args.meta) if args.meta else meta_sidecar_path(scene)
        if not meta_path.exists():
            raise ConfigError(f"no metadata for {scene} (expected {meta_path})")
        sid = db.ingest_scene(scene, read_json(meta_path))
        print(f"ingested {sid}")
    print(f"catalog {db.catalog_path}: {len(db)} scenes")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {"mode": args.mode, "workers": args.workers, "enlarge_scale": args.enlarge_scale,
                 "patch_px": args.patch_px}
    config = load_config(args.config, overrides)
    if args.mock_script:
        adapters = scripted_adapters(load_script(args.mock_script))
    else:
        adapters = build_http_adapters(config)
    catalog = Path(args.catalog)
    if not (catalog / "catalog.jsonl").exists():
        raise ConfigError(f"no catalog found in {catalog}")
    db = SceneDB(catalog)
    files = _collect_patches(args.patches)
    patches = [load_patch(f) for f in files]
    gt = None
    if args.gt:
        gt = {p.patch_id: read_mask(Path(args.gt) / f"{p.patch_id}.png")
              for p in patches if (Path(args.gt) / f"{p.patch_id}.png").exists()}

    outcome = run_dataset(patches, config, adapters, db, ground_truth=gt)
    out = Path(args.out)
    manifest = RunManifest(
        config_path=str(args.config) if args.config else None,
        mode=config.mode,
        dataset=[str(f) for f in files],
        catalog=str(catalog),
        adapters=adapters.identities(),
        output_dir=str(out),
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        mock_script={"path": str(args.mock_script), "sha256": _sha256(args.mock_script)} if args.mock_script else None,
        config=config.to_dict(),
        failures=outcome.failures,
    )
    for pid in outcome.patch_ids:
        res = outcome.results.get(pid)
        if res is not None:
            manifest.results[pid] = save_result(out, res)
    if outcome.report is not None:
        write_json(out / "report" / "report.json", outcome.report)
        (out / "report" / "report.csv").write_text(report_csv(outcome.report))
        manifest.metrics = outcome.report["overall"]
    write_json(out / "manifest.json", asdict(manifest))

    n_ok, n_fail = len(outcome.results), len(outcome.failures)
    regions = sum(len(r.trace.regions) for r in outcome.results.values())
    applied = sum(1 for r in outcome.results.values() for rec in r.trace.regions if rec.applied != "skip")
    print(f"{n_ok} patches done, {n_fail} failed; {regions} ambiguous regions, {applied} corrected")
    for pid, err in outcome.failures.items():
        print(f"  FAILED {pid}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if n_fail else EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    groups = read_json(args.groups) if args.groups else {}
    rows = []
    missing = []
    for gt_path in sorted(gt_dir.glob("*.png")):
        pid = gt_path.stem
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            missing.append(pid)
            continue
        rows.append((pid, groups.get(pid, "all"), confusion(read_mask(pred_path), read_mask(gt_path))))
    if not rows:
        raise ConfigError(f"no matching prediction/ground-truth pairs in {pred_dir} and {gt_dir}")
    report = aggregate(rows)
    text = report_csv(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        write_json(out / "report.json", report)
        (out / "report.csv").write_text(text)
    for pid in missing:
        print(f"  missing prediction for {pid}", file=sys.stderr)
    return EXIT_PARTIAL if missing else EXIT_OK


def _fmt_region(rec, show_prompts: bool) -> list[str]:
    r = rec.region
    lines = [f"region {r.region_id}  bbox={r.bbox.as_list()}  area={r.bbox_area}  pixels={r.pixel_count}",
             f"  outcome: {rec.applied}" + (f"  ({rec.note})" if rec.note else "")]
    if rec.prompt_i and show_prompts:
        lines += ["  prompt I:"] + ["    | " + ln for ln in rec.prompt_i.splitlines()]
    for resp in rec.responses:
        first = resp["text"].strip().splitlines()[-1] if resp["text"].strip() else "<empty>"
        err = f"  [{resp['parse_error']}]" if resp.get("parse_error") else ""
        lines.append(f"  {resp['stage']} #{resp['attempt']}: {first}{err}")
    if rec.directive:
        honored = "honored" if rec.honored else "not honored"
        lines.append(f"  directive: {rec.directive['kind']} ({honored})")
    if rec.query:
        lines.append(f"  query: {rec.query['kind']} bbox={rec.query['geo_bbox']} -> {len(rec.candidates)} candidates")
        for i, c in enumerate(rec.candidates, 1):
            lines.append(f"    {i}. {c['source_scene_id']} {c['season']} {c['acquisition_tag']}")
    if rec.selection:
        how = "auto (single candidate)" if rec.selection.get("skipped") else "model"
        lines.append(f"  selected: {rec.selection['chosen_candidate_id']} via {how}")
    if rec.prompt_ii and show_prompts:
        lines += ["  prompt II:"] + ["    | " + ln for ln in rec.prompt_ii.splitlines()]
    if rec.verdict:
        lines.append(f"  verdict: {rec.verdict['value']}")
    if rec.prompt_iii and show_prompts:
        lines += ["  prompt III:"] + ["    | " + ln for ln in rec.prompt_iii.splitlines()]
    if rec.ys:
        lines.append(f"  refiner mask: {rec.ys['registered_pixels']} px from {rec.ys['source_scene_id']}, "
                     f"{rec.ys['changed_pixels']} px changed")
    if rec.error:
        lines.append(f"  error: {rec.error['type']}: {rec.error['message']}")
    if rec.timings:
        lines.append("  timings: " + ", ".join(f"{k}={v:.3f}s" for k, v in sorted(rec.timings.items())))
    return lines


def render_trace(trace: CorrectionTrace, show_prompts: bool = False) -> str:
    lines = [f"patch {trace.patch_id}  mode={trace.mode}"]
    lines += [f"  {role}: {name}" for role, name in sorted(trace.adapters.items())]
    if not trace.regions:
        lines.append("no ambiguous regions")
    for rec in trace.regions:
        lines += _fmt_region(rec, show_prompts)
    if trace.timings:
        lines.append("stage timings: " + ", ".join(f"{k}={v:.3f}s" for k, v in trace.timings.items()))
    return "\n".join(lines)


def cmd_trace(args) -> int:
    for path in args.traces:
        print(render_trace(CorrectionTrace.from_dict(read_json(path)), args.prompts))
    return EXIT_OK


def cmd_serve_db(args) -> int:
    server = make_query_server(SceneDB(args.catalog), args.host, args.port)
    print(f"serving {args.catalog} on http://{server.server_address[0]}:{server.server_address[1]}/query")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="farmmind", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="add scenes to a catalog")
    s.add_argument("catalog", help="catalog directory (created if missing)")
    s.add_argument("scenes", nargs="+", help="scene PNGs with .geo.json (and .meta.json) sidecars")
    s.add_argument("--meta", help="metadata JSON to use instead of the .meta.json sidecar (single scene)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("run", help="refine patches")
    s.add_argument("--patches", nargs="+", required=True, help="patch PNGs or directories of them")
    s.add_argument("--catalog", required=True, help="scene catalog directory")
    s.add_argument("--out", required=True, help="output directory (masks/, traces/, report/)")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--mode", choices=MODES, help="ablation mode (default from config, else full)")
    s.add_argument("--mock-script", help="replay scripted model replies instead of calling endpoints")
    s.add_argument("--gt", help="ground-truth mask directory; enables the metrics report")
    s.add_argument("--workers", type=int, help="patches processed in parallel")
    s.add_argument("--enlarge-scale", type=float, help="footprint factor for enlarge queries")
    s.add_argument("--patch-px", type=int, help="side of auxiliary crops in pixels")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("pred", help="directory of predicted mask PNGs")
    s.add_argument("gt", help="directory of ground-truth mask PNGs")
    s.add_argument("--groups", help="JSON map of patch id to group name")
    s.add_argument("--out", help="directory for report.json and report.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("trace", help="print correction traces")
    s.add_argument("traces", nargs="+", help="trace JSON files")
    s.add_argument("--prompts", action="store_true", help="include full prompt texts")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("serve-db", help="serve catalog queries over HTTP (POST /query)")
    s.add_argument("catalog")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.set_defaults(func=cmd_serve_db)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CatalogError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
