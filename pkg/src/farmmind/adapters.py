"""Concrete model adapters: HTTP clients for remote services and scripted mocks.

Wire formats::

    RQM  POST {"model", "prompt", "images": [base64 PNG], "max_tokens"} -> {"text"}
    FSM  POST {"image": base64 PNG, "box": [x0, y0, x1, y1]?} -> {"mask_rle", "confidence_b64_f32le"}
"""
from __future__ import annotations

import base64
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .io import confidence_from_bytes, confidence_to_bytes, image_to_b64
from .protocol import decode_rle, encode_rle
from .raster import Bbox, RasterError, as_image

log = logging.getLogger(__name__)


class AdapterError(Exception):
    pass


class TransportError(AdapterError):
    pass


class AdapterTimeout(AdapterError):
    pass


class HttpStatusError(AdapterError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class SchemaError(AdapterError):
    pass


class ScriptExhaustedError(AdapterError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    max_backoff: float = 8.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return min(self.backoff_base * self.backoff_factor ** (attempt - 1), self.max_backoff)


class RateLimiter:
    """Spaces request starts at least ``1 / rate`` seconds apart."""

    def __init__(self, rate_per_s: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / rate_per_s if rate_per_s else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


class _HttpAdapter:
    def __init__(self, url: str, *, api_key: str | None = None, timeout: float = 60.0,
                 retry: RetryPolicy = RetryPolicy(), rate_per_s: float | None = None,
                 max_concurrency: int = 4, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep, name: str | None = None):
        self.url = url
        self.name = name or url
        self.timeout = timeout
        self.retry = retry
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client()
        self._sleep = sleep
        self._limiter = RateLimiter(rate_per_s, sleep=sleep)
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self.attempt_log: list[tuple[int, str]] = []

    def _post_once(self, payload: dict) -> dict:
        self._limiter.acquire()
        with self._slots:
            try:
                resp = self._client.post(self.url, json=payload, headers=self._headers, timeout=self.timeout)
            except httpx.TimeoutException as exc:
                raise AdapterTimeout(f"{self.url}: {exc}") from exc
            except httpx.HTTPError as exc:
                raise TransportError(f"{self.url}: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise HttpStatusError(resp.status_code, resp.text)
        try:
            body = resp.json()
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise SchemaError(f"{self.url}: response is not JSON") from exc
        if not isinstance(body, dict):
            raise SchemaError(f"{self.url}: response is not a JSON object")
        return body

    @staticmethod
    def _retryable(exc: AdapterError) -> bool:
        if isinstance(exc, HttpStatusError):
            return exc.status >= 500 or exc.status == 429
        return isinstance(exc, (TransportError, AdapterTimeout))

    def post(self, payload: dict) -> dict:
        for attempt in range(1, self.retry.attempts + 1):
            try:
                body = self._post_once(payload)
            except AdapterError as exc:
                self.attempt_log.append((attempt, type(exc).__name__))
                if attempt == self.retry.attempts or not self._retryable(exc):
                    raise
                delay = self.retry.delay(attempt)
                log.warning("%s: attempt %d failed (%s), retrying in %.2fs", self.name, attempt, exc, delay)
                self._sleep(delay)
            else:
                self.attempt_log.append((attempt, "ok"))
                return body
        raise AssertionError("unreachable")

    def close(self) -> None:
        self._client.close()


class HttpRqmAdapter(_HttpAdapter):
    def __init__(self, url: str, model: str, max_tokens: int = 1024, **kw):
        super().__init__(url, name=kw.pop("name", f"http-rqm:{model}"), **kw)
        self.model = model
        self.max_tokens = max_tokens

    def complete(self, images: Sequence[np.ndarray], prompt: str, params: Mapping | None = None) -> str:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "images": [image_to_b64(im) for im in images],
            "max_tokens": int((params or {}).get("max_tokens", self.max_tokens)),
        }
        body = self.post(payload)
        text = body.get("text")
        if not isinstance(text, str):
            raise SchemaError(f"{self.url}: response lacks a string 'text' field")
        return text


class HttpFsmAdapter(_HttpAdapter):
    def __init__(self, url: str, **kw):
        super().__init__(url, name=kw.pop("name", f"http-fsm:{url}"), **kw)

    def segment(self, image: np.ndarray, box: Bbox | None = None) -> tuple[np.ndarray, np.ndarray]:
        image = as_image(image)
        payload: dict = {"image": image_to_b64(image)}
        if box is not None:
            payload["box"] = box.as_list()
        body = self.post(payload)
        h, w = image.shape[:2]
        try:
            mask = decode_rle(body["mask_rle"], (h, w))
            conf = confidence_from_bytes(base64.b64decode(body["confidence_b64_f32le"]), w, h)
        except (KeyError, TypeError, ValueError, RasterError) as exc:
            raise SchemaError(f"{self.url}: malformed segmentation response: {exc}") from exc
        return mask, conf


def fsm_response(mask, conf) -> dict:
    """Server-side helper building an FSM wire response."""
    return {
        "mask_rle": encode_rle(mask),
        "confidence_b64_f32le": base64.b64encode(confidence_to_bytes(conf)).decode("ascii"),
    }


# ---------------------------------------------------------------------------
# deterministic stand-ins


class GreenThresholdSegmenter:
    """Scores each pixel by its green channel: ``(G - threshold) / scale``."""

    def __init__(self, threshold: float = 128.0, scale: float = 16.0):
        self.threshold = threshold
        self.scale = scale
        self.name = f"green-threshold:{threshold}/{scale}"

    def segment(self, image, box: Bbox | None = None):
        image = as_image(image)
        conf = (image[..., 1].astype(np.float64) - self.threshold) / self.scale
        mask = (conf > 0).astype(np.uint8)
        if box is not None:
            keep = np.zeros(mask.shape, dtype=bool)
            keep[box.slices] = True
            mask[~keep] = 0
        return mask, conf


class BoxColorSegmenter:
    """Box-prompted stand-in: inside the box, marks pixels close in colour to the box centre."""

    def __init__(self, tolerance: int = 40):
        self.tolerance = tolerance
        self.name = f"box-color:{tolerance}"

    def segment(self, image, box: Bbox | None = None):
        image = as_image(image)
        h, w = image.shape[:2]
        if box is None:
            box = Bbox(0, 0, w, h)
        cx0 = box.x_min + box.width // 3
        cy0 = box.y_min + box.height // 3
        core = image[cy0:max(cy0 + 1, box.y_max - box.height // 3),
                     cx0:max(cx0 + 1, box.x_max - box.width // 3)].reshape(-1, 3)
        ref = np.median(core, axis=0)
        dist = np.abs(image.astype(np.float64) - ref).max(axis=2)
        conf = np.full((h, w), -10.0)
        conf[box.slices] = (self.tolerance - dist[box.slices]) / max(self.tolerance, 1)
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[box.slices] = dist[box.slices] <= self.tolerance
        return mask, conf


def make_stub_fsm(spec: Mapping):
    kind = spec.get("type")
    if kind == "green-threshold":
        return GreenThresholdSegmenter(float(spec.get("threshold", 128)), float(spec.get("scale", 16)))
    if kind == "box-color":
        return BoxColorSegmenter(int(spec.get("tolerance", 40)))
    raise ValueError(f"unknown scripted segmenter type {kind!r}")


class ScriptedRqm:
    """Replays canned replies keyed by ``(stage, region_id)``.

    ``script["rqm"][stage][key]`` is a reply or a list of replies consumed in
    order, where ``key`` is ``"<patch_id>/<region_id>"`` or just
    ``"<region_id>"``.  Calls must pass ``params`` with ``stage`` and
    ``region_id`` (and optionally ``patch_id``).
    """

    def __init__(self, script: Mapping, name: str = "scripted-rqm"):
        self.name = name
        self._replies = script.get("rqm", {})
        self._used: dict[tuple, int] = {}
        self._lock = threading.Lock()
        self.calls: list[dict] = []

    def _lookup(self, stage: str, patch_id, region_id) -> tuple[str, list]:
        table = self._replies.get(stage, {})
        for key in (f"{patch_id}/{region_id}", str(region_id)):
            if patch_id is None and "/" in key:
                continue
            if key in table:
                replies = table[key]
                return key, [replies] if isinstance(replies, str) else list(replies)
        raise ScriptExhaustedError(f"no scripted {stage} reply for patch={patch_id} region={region_id}")

    def complete(self, images, prompt: str, params: Mapping | None = None) -> str:
        params = params or {}
        stage, region_id, patch_id = params.get("stage"), params.get("region_id"), params.get("patch_id")
        key, replies = self._lookup(stage, patch_id, region_id)
        with self._lock:
            n = self._used.get((stage, key), 0)
            if n >= len(replies):
                raise ScriptExhaustedError(f"script exhausted for {stage} {key} after {n} replies")
            self._used[(stage, key)] = n + 1
            self.calls.append({"stage": stage, "key": key, "n_images": len(images)})
        return replies[n]


@dataclass
class Adapters:
    """The three model roles used by a run."""

    rqm: object
    segmenter: object
    refiner: object

    def identities(self) -> dict:
        return {"rqm": self.rqm.name, "segmenter": self.segmenter.name, "refiner": self.refiner.name}


def load_script(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def scripted_adapters(script: Mapping | str | Path) -> Adapters:
    """Fresh deterministic adapters from a script dict or JSON file."""
    if not isinstance(script, Mapping):
        script = load_script(script)
    name = script.get("name", "script")
    return Adapters(
        rqm=ScriptedRqm(script, name=f"scripted-rqm:{name}"),
        segmenter=make_stub_fsm(script.get("segmenter", {"type": "green-threshold"})),
        refiner=make_stub_fsm(script.get("refiner", {"type": "box-color"})),
    )
