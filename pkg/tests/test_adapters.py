import base64
import json

import httpx
import numpy as np
import pytest

from farmmind.adapters import (
    AdapterTimeout,
    BoxColorSegmenter,
    GreenThresholdSegmenter,
    HttpFsmAdapter,
    HttpRqmAdapter,
    HttpStatusError,
    RateLimiter,
    RetryPolicy,
    SchemaError,
    ScriptExhaustedError,
    ScriptedRqm,
    TransportError,
    fsm_response,
    scripted_adapters,
)
from farmmind.io import image_from_b64
from farmmind.protocol import FsmAdapter, RqmAdapter
from farmmind.raster import Bbox

IMG = np.random.default_rng(0).integers(0, 256, (6, 8, 3), dtype=np.uint8)


def client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def sequence(*responses):
    """Handler replaying ``responses`` (httpx.Response or exception) in order."""
    it = iter(responses)
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        item = next(it)
        if isinstance(item, Exception):
            raise item
        return item

    handler.seen = seen
    return handler


def rqm(handler, **kw):
    return HttpRqmAdapter("http://rqm/v1", "vl-model", client=client(handler), sleep=kw.pop("sleep", lambda s: None),
                          **kw)


def test_rqm_echo_payload():
    def echo(request):
        body = json.loads(request.content)
        assert request.headers["authorization"] == "Bearer sk-test"
        assert body["model"] == "vl-model" and body["max_tokens"] == 77
        assert np.array_equal(image_from_b64(body["images"][0]), IMG)
        return httpx.Response(200, json={"text": body["prompt"][::-1]})

    a = rqm(echo, api_key="sk-test")
    assert a.complete([IMG], "abc", {"max_tokens": 77}) == "cba"
    assert isinstance(a, RqmAdapter)
    assert a.attempt_log == [(1, "ok")]


def test_retries_5xx_then_succeeds_with_backoff():
    sleeps = []
    h = sequence(httpx.Response(500), httpx.Response(503), httpx.Response(200, json={"text": "ok"}))
    a = rqm(h, sleep=sleeps.append, retry=RetryPolicy(attempts=3, backoff_base=0.5))
    assert a.complete([], "p") == "ok"
    assert a.attempt_log == [(1, "HttpStatusError"), (2, "HttpStatusError"), (3, "ok")]
    assert sleeps == [0.5, 1.0]
    assert len(h.seen) == 3


def test_gives_up_after_three_attempts():
    h = sequence(*[httpx.Response(502)] * 3)
    with pytest.raises(HttpStatusError) as info:
        rqm(h).complete([], "p")
    assert info.value.status == 502
    assert len(h.seen) == 3


def test_429_and_transport_errors_are_retried():
    req = httpx.Request("POST", "http://rqm/v1")
    h = sequence(httpx.Response(429), httpx.ConnectError("refused", request=req),
                 httpx.Response(200, json={"text": "fine"}))
    a = rqm(h)
    assert a.complete([], "p") == "fine"
    assert [k for _, k in a.attempt_log] == ["HttpStatusError", "TransportError", "ok"]


def test_4xx_is_not_retried():
    h = sequence(httpx.Response(401, text="bad key"))
    with pytest.raises(HttpStatusError, match="401"):
        rqm(h).complete([], "p")
    assert len(h.seen) == 1


def test_timeout_maps_to_adapter_timeout():
    req = httpx.Request("POST", "http://rqm/v1")
    h = sequence(*[httpx.ReadTimeout("slow", request=req)] * 3)
    with pytest.raises(AdapterTimeout):
        rqm(h).complete([], "p")


def test_connect_failure_maps_to_transport_error():
    req = httpx.Request("POST", "http://rqm/v1")
    h = sequence(*[httpx.ConnectError("down", request=req)] * 3)
    with pytest.raises(TransportError):
        rqm(h).complete([], "p")


@pytest.mark.parametrize("resp", [httpx.Response(200, text="<html>"), httpx.Response(200, json=[1, 2]),
                                  httpx.Response(200, json={"answer": "yes"})])
def test_schema_errors(resp):
    with pytest.raises(SchemaError):
        rqm(sequence(resp)).complete([], "p")


def test_fsm_wire_round_trip():
    mask = (IMG[..., 0] > 128).astype(np.uint8)
    conf = IMG[..., 1].astype(np.float64) / 8 - 16

    def server(request):
        body = json.loads(request.content)
        assert body["box"] == [1, 1, 5, 4]
        assert np.array_equal(image_from_b64(body["image"]), IMG)
        return httpx.Response(200, json=fsm_response(mask, conf))

    a = HttpFsmAdapter("http://fsm/segment", client=client(server))
    got_mask, got_conf = a.segment(IMG, Bbox(1, 1, 5, 4))
    assert isinstance(a, FsmAdapter)
    assert np.array_equal(got_mask, mask)
    assert np.array_equal(got_conf, conf)


def test_fsm_wrong_size_response_is_schema_error():
    def server(request):
        return httpx.Response(200, json={"mask_rle": [3],
                                         "confidence_b64_f32le": base64.b64encode(b"\0" * 12).decode()})

    with pytest.raises(SchemaError):
        HttpFsmAdapter("http://fsm", client=client(server)).segment(IMG)


def test_rate_limiter_spaces_requests():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    lim = RateLimiter(4.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        lim.acquire()
    assert slept == [0.25, 0.25]
    RateLimiter(None).acquire()


# -- stubs and scripts ---------------------------------------------------------

def test_green_threshold_segmenter():
    img = np.zeros((1, 3, 3), np.uint8)
    img[0, :, 1] = [112, 128, 160]
    mask, conf = GreenThresholdSegmenter().segment(img)
    assert conf.tolist() == [[-1.0, 0.0, 2.0]]
    assert mask.tolist() == [[0, 0, 1]]


def test_box_color_segmenter_stays_in_box():
    img = np.zeros((10, 10, 3), np.uint8)
    img[:, :5] = (40, 200, 40)
    mask, conf = BoxColorSegmenter(40).segment(img, Bbox(0, 0, 4, 10))
    assert mask[:, :4].all() and not mask[:, 4:].any()
    assert conf.shape == (10, 10)


def test_scripted_rqm_consumes_in_order():
    s = ScriptedRqm({"rqm": {"verdict": {"p/1": ["ANSWER: yes", "ANSWER: no"], "2": "ANSWER: no"}}})
    params = {"stage": "verdict", "region_id": 1, "patch_id": "p"}
    assert s.complete([], "x", params) == "ANSWER: yes"
    assert s.complete([IMG], "x", params) == "ANSWER: no"
    with pytest.raises(ScriptExhaustedError):
        s.complete([], "x", params)
    # falls back to the bare region key
    assert s.complete([], "x", {"stage": "verdict", "region_id": 2, "patch_id": "q"}) == "ANSWER: no"
    with pytest.raises(ScriptExhaustedError):
        s.complete([], "x", {"stage": "directive", "region_id": 1, "patch_id": "p"})
    assert [c["n_images"] for c in s.calls] == [0, 1, 0]


def test_scripted_adapters_fresh_each_time(tmp_path):
    script = {"name": "t", "rqm": {"directive": {"1": "<reg-1>"}}}
    (tmp_path / "s.json").write_text(json.dumps(script))
    a, b = scripted_adapters(script), scripted_adapters(tmp_path / "s.json")
    p = {"stage": "directive", "region_id": 1}
    assert a.rqm.complete([], "", p) == b.rqm.complete([], "", p) == "<reg-1>"
    assert a.identities() == {"rqm": "scripted-rqm:t", "segmenter": "green-threshold:128.0/16.0",
                              "refiner": "box-color:40"}
