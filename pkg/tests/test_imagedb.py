import json
import random
import threading

import httpx
import numpy as np
import pytest

from farmmind.imagedb import (
    SEASONS,
    CatalogError,
    DuplicateSceneError,
    QuerySpec,
    QuerySpecError,
    RemoteSceneDB,
    SceneDB,
    crop_by_geo,
    handle_query_request,
    make_query_server,
)
from farmmind.io import write_geo, write_image
from farmmind.raster import GeoBox, GeoTransform, RasterError
from farmmind.synthetic import PROVINCE_AREAS, build_random_catalog


def add_scene(db, root, sid, season, types, province="Anhui", geo=None, tag="2023", px=16):
    path = root / "scenes" / f"{sid}.png"
    write_image(path, np.full((px, px, 3), SEASONS.index(season) * 40, np.uint8))
    write_geo(path, geo or GeoTransform(116.0, 32.0, 0.01, -0.01))
    return db.ingest_scene(path, {"scene_id": sid, "data_types": types, "season": season,
                                  "admin_region": {"country": "China", "province": province},
                                  "acquisition_tag": tag})


def linear_oracle(records, spec):
    """Independent reading of the query contract."""
    want_type = {"temporal": "multi-temporal", "enlarge": "enlarge"}[spec.kind]
    box = spec.geo_bbox
    if spec.kind == "enlarge":
        cx, cy = (box.west + box.east) / 2, (box.south + box.north) / 2
        hw = (box.east - box.west) * spec.enlarge_scale / 2
        hh = (box.north - box.south) * spec.enlarge_scale / 2
        box = GeoBox(cx - hw, cy - hh, cx + hw, cy + hh)
    hits = []
    for r in records:
        if want_type not in r.data_types:
            continue
        if spec.province and (r.country, r.province) != tuple(spec.province):
            continue
        if spec.kind == "temporal" and r.season == spec.exclude_season:
            continue
        w, s, e, n = r.footprint.as_list()
        tol = 1e-6 * abs(r.geo.pixel_width_deg)
        if box.west >= w - tol and box.east <= e + tol and box.south >= s - tol and box.north <= n + tol:
            hits.append(r)
    if spec.kind == "temporal":
        latest = {}
        for r in hits:
            if r.season not in latest or (r.acquisition_tag, r.scene_id) > (latest[r.season].acquisition_tag,
                                                                              latest[r.season].scene_id):
                latest[r.season] = r
        hits = list(latest.values())
    order = {s: i for i, s in enumerate(["spring", "summer", "autumn", "winter"])}
    return sorted(hits, key=lambda r: (order[r.season], r.scene_id))


def random_spec(rng, records=()):
    """Half the boxes sit inside some scene so that hits are common."""
    kind = rng.choice(["temporal", "enlarge"])
    if records and rng.random() < 0.5:
        w, s, e, n = rng.choice(records).footprint.as_list()
        size = rng.uniform(0.2, 0.6) * (e - w) / 3
        pad = 0.0
    else:
        w, s, e, n = rng.choice(list(PROVINCE_AREAS.values()))
        size = rng.uniform(0.005, 0.25)
        pad = 0.1
    lon = rng.uniform(w - pad, e + pad - size)
    lat = rng.uniform(s - pad, n + pad - size)
    province = rng.choice([None, None, ("China", "Anhui"), ("China", "Hebei"), ("China", "Yunnan"),
                           ("China", "Tibet")])
    return QuerySpec(kind, GeoBox(lon, lat, lon + size, lat + size),
                     exclude_season=rng.choice([None, *SEASONS]),
                     enlarge_scale=rng.uniform(1.5, 4.0), requested_patch_px=8, province=province)


@pytest.fixture(scope="module")
def random_db(tmp_path_factory):
    return build_random_catalog(tmp_path_factory.mktemp("rand"), seed=7)


def test_index_equals_scan_and_oracle(random_db):
    rng = random.Random(3)
    nonempty = 0
    for _ in range(300):
        spec = random_spec(rng, random_db.records)
        idx = random_db.lookup(spec)
        assert [r.scene_id for r in idx] == [r.scene_id for r in random_db.scan(spec)]
        assert [r.scene_id for r in idx] == [r.scene_id for r in linear_oracle(random_db.records, spec)]
        nonempty += bool(idx)
    assert nonempty > 60  # the sample actually exercises hits


def test_query_candidates_identical_with_and_without_index(random_db):
    rng = random.Random(11)
    for _ in range(40):
        spec = random_spec(rng, random_db.records)
        a, b = random_db.query(spec), random_db.query(spec, use_index=False)
        assert [c.candidate_id for c in a] == [c.candidate_id for c in b]
        assert [c.footprint for c in a] == [c.footprint for c in b]
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_bucket_counts(tmp_path):
    db = SceneDB(tmp_path / "cat")
    for prov in ("Anhui", "Hebei", "Yunnan"):
        for season in SEASONS:
            add_scene(db, tmp_path, f"{prov}-{season}", season, ["multi-temporal"], prov)
    buckets = db.buckets("multi-temporal")
    assert sorted(buckets) == [("China", "Anhui"), ("China", "Hebei"), ("China", "Yunnan")]
    assert all(len(v) == 4 for v in buckets.values())
    assert db.buckets("enlarge") == {}
    assert len(db) == 12


def test_random_catalog_buckets_cover_every_record(random_db):
    for t in ("multi-temporal", "enlarge"):
        in_buckets = sorted(r.scene_id for recs in random_db.buckets(t).values() for r in recs)
        assert in_buckets == sorted(r.scene_id for r in random_db.records if t in r.data_types)


def test_catalog_persists_and_ingest_is_idempotent(tmp_path):
    db = SceneDB(tmp_path / "cat")
    add_scene(db, tmp_path, "s1", "spring", ["enlarge"])
    add_scene(db, tmp_path, "s1", "spring", ["enlarge"])
    assert len(db.catalog_path.read_text().splitlines()) == 1
    again = SceneDB(tmp_path / "cat")
    assert again.records == db.records
    with pytest.raises(DuplicateSceneError):
        add_scene(db, tmp_path, "s1", "winter", ["enlarge"])


@pytest.mark.parametrize("meta_patch", [{"season": "monsoon"}, {"data_types": ["thermal"]}, {"data_types": []},
                                        {"admin_region": {"country": "China", "province": ""}}])
def test_bad_metadata_rejected(tmp_path, meta_patch):
    path = tmp_path / "x.png"
    write_image(path, np.zeros((4, 4, 3), np.uint8))
    write_geo(path, GeoTransform(0, 0, 1, -1))
    meta = {"scene_id": "x", "data_types": ["enlarge"], "season": "spring",
            "admin_region": {"country": "China", "province": "Anhui"}}
    meta.update(meta_patch)
    with pytest.raises(CatalogError):
        SceneDB(tmp_path / "cat").ingest_scene(path, meta)


def test_corrupt_catalog_line(tmp_path):
    (tmp_path / "catalog.jsonl").write_text('{"scene_id": "x"}\n')
    with pytest.raises(CatalogError, match="catalog.jsonl:1"):
        SceneDB(tmp_path)


def test_temporal_keeps_latest_per_season_and_excludes_own(tmp_path):
    db = SceneDB(tmp_path / "cat")
    add_scene(db, tmp_path, "old-spring", "spring", ["multi-temporal"], tag="2021-04-01")
    add_scene(db, tmp_path, "new-spring", "spring", ["multi-temporal"], tag="2023-04-01")
    add_scene(db, tmp_path, "summer", "summer", ["multi-temporal"])
    add_scene(db, tmp_path, "winter", "winter", ["multi-temporal", "enlarge"])
    box = GeoBox(116.02, 31.9, 116.05, 31.95)
    got = [r.scene_id for r in db.lookup(QuerySpec("temporal", box, exclude_season="summer"))]
    assert got == ["new-spring", "winter"]
    got = [r.scene_id for r in db.lookup(QuerySpec("enlarge", box, exclude_season="winter", enlarge_scale=2))]
    assert got == ["winter"]


def test_enlarge_needs_the_whole_scaled_footprint(tmp_path):
    db = SceneDB(tmp_path / "cat")
    add_scene(db, tmp_path, "e", "summer", ["enlarge"])  # footprint [116, 31.84] .. [116.16, 32]
    near_edge = GeoBox(116.005, 31.9, 116.02, 31.91)
    assert db.lookup(QuerySpec("enlarge", near_edge, enlarge_scale=1.2))
    assert db.lookup(QuerySpec("enlarge", near_edge, enlarge_scale=3.0)) == []
    assert db.query(QuerySpec("enlarge", GeoBox(150, 10, 151, 11))) == []


def test_query_spec_validation():
    box = GeoBox(0, 0, 1, 1)
    for kw in (dict(kind="thermal"), dict(exclude_season="dry"), dict(enlarge_scale=1.0),
               dict(requested_patch_px=0)):
        args = dict(kind="temporal", geo_bbox=box)
        args.update(kw)
        with pytest.raises(QuerySpecError):
            QuerySpec(**args)
    spec = QuerySpec("enlarge", box, province=("China", "Anhui"))
    assert QuerySpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


# -- cropping ----------------------------------------------------------------

def test_crop_own_footprint_is_identity():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
    g = GeoTransform(10.0, 5.0, 0.1, -0.1)
    c = crop_by_geo(px, g, g.footprint(30, 20), (30, 20), scene_id="s", season="spring")
    assert np.array_equal(c.pixels, px)
    assert c.candidate_id.startswith("s@")
    assert c.meta()["width"] == 30 and c.meta()["height"] == 20


def test_crop_ramp_oracle():
    # pixel value encodes its own column and row, so the crop reveals the sampled indices
    h, w = 40, 60
    rows, cols = np.mgrid[0:h, 0:w]
    px = np.stack([cols, rows, np.zeros_like(cols)], axis=2).astype(np.uint8)
    g = GeoTransform(0.0, 0.0, 0.5, -0.5)
    box = GeoBox(5.0, -15.0, 20.0, -5.0)  # cols 10..40, rows 10..30
    c = crop_by_geo(px, g, box, (15, 10))
    assert c.pixels[..., 0].tolist() == [[10 + 2 * i + 1 for i in range(15)]] * 10
    assert c.pixels[:, 0, 1].tolist() == [10 + 2 * j + 1 for j in range(10)]
    assert c.geo.footprint(15, 10) == box


def test_crop_outside_footprint_raises():
    g = GeoTransform(0.0, 0.0, 1.0, -1.0)
    with pytest.raises(RasterError):
        crop_by_geo(np.zeros((4, 4, 3), np.uint8), g, GeoBox(2, -3, 5, -1), 4)


def test_demo_world_queries(demo_world, demo_db):
    from farmmind.synthetic import patch_geo
    from farmmind.raster import Bbox
    box = patch_geo("p-two").box_to_geo(Bbox(60, 80, 140, 160))
    temporal = demo_db.query(QuerySpec("temporal", box, "summer", requested_patch_px=64,
                                       province=("China", "Henan")))
    assert [c.season for c in temporal] == ["spring", "autumn", "winter"]
    enlarge = demo_db.query(QuerySpec("enlarge", box, "summer", requested_patch_px=64))
    assert [c.season for c in enlarge] == ["summer", "autumn"]
    assert enlarge[0].footprint == box.scaled(3.0)


# -- concurrency and HTTP ------------------------------------------------------

def test_concurrent_ingest_and_query(tmp_path):
    db = SceneDB(tmp_path / "cat")
    box = GeoBox(116.02, 31.9, 116.05, 31.95)
    errors = []

    def writer(k):
        try:
            for i in range(6):
                add_scene(db, tmp_path, f"w{k}-{i}", SEASONS[i % 4], ["multi-temporal"], tag=f"{k}{i}")
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    def reader():
        try:
            for _ in range(50):
                recs = db.lookup(QuerySpec("temporal", box))
                assert len({r.season for r in recs}) == len(recs)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(3)]
    threads += [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(db) == 18
    assert len(SceneDB(tmp_path / "cat")) == 18


def test_query_handler_rejects_bad_requests(demo_db):
    status, body = handle_query_request(demo_db, b"not json")
    assert status == 400 and "error" in body
    status, body = handle_query_request(demo_db, json.dumps({"kind": "temporal"}).encode())
    assert status == 400


def test_remote_db_over_mock_transport(demo_db):
    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/query"
        status, payload = handle_query_request(demo_db, request.content)
        return httpx.Response(status, json=payload)

    remote = RemoteSceneDB("http://db", client=httpx.Client(base_url="http://db",
                                                            transport=httpx.MockTransport(handler)))
    box = GeoBox(113.03, 33.97, 113.04, 33.98)
    spec = QuerySpec("temporal", box, "winter", requested_patch_px=16)
    got, want = remote.query(spec), demo_db.query(spec)
    assert [c.candidate_id for c in got] == [c.candidate_id for c in want]
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(got, want))
    assert remote.query(QuerySpec("temporal", GeoBox(0, 0, 1, 1))) == []


def test_query_server_round_trip(demo_db):
    server = make_query_server(demo_db)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        host, port = server.server_address[:2]
        base = f"http://{host}:{port}"
        spec = QuerySpec("enlarge", GeoBox(113.03, 33.97, 113.04, 33.98), requested_patch_px=16)
        r = httpx.post(base + "/query", json=spec.to_json())
        assert r.status_code == 200 and r.json()["status"] == "ok"
        assert len(r.json()["candidates"]) == 2
        empty = httpx.post(base + "/query", json=QuerySpec("enlarge", GeoBox(0, 0, 1, 1)).to_json())
        assert empty.json() == {"status": "empty", "candidates": []}
        assert httpx.post(base + "/other", json={}).status_code == 404
        assert httpx.post(base + "/query", content=b"{").status_code == 400
    finally:
        server.shutdown()
        server.server_close()
