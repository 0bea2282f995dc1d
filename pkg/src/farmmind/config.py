"""Run configuration: a JSON file, environment overrides, then CLI flags.

Example file::

    {
      "ambiguity": {"threshold": 1.0, "area_min": 5000, "area_increment": 95000},
      "enlarge_scale": 3.0,
      "patch_px": 512,
      "mode": "full",
      "workers": 4,
      "rqm": {"url": "https://rqm.example/v1/complete", "model": "some-vl-model"},
      "segmenter": {"url": "http://localhost:9001/segment"},
      "refiner": {"url": "http://localhost:9002/segment"}
    }

Secrets never live in the file.  ``FARMMIND_<ROLE>_API_KEY`` supplies the
key for each role, and ``FARMMIND_<ROLE>_URL`` overrides its endpoint.
"""
from __future__ import annotations

import json
import os
from typing import Mapping

from .adapters import Adapters, HttpFsmAdapter, HttpRqmAdapter, RetryPolicy
from .pipeline import ConfigError, PipelineConfig

ROLES = ("rqm", "segmenter", "refiner")


def load_config(path=None, overrides: Mapping | None = None,
                environ: Mapping[str, str] | None = None) -> PipelineConfig:
    environ = os.environ if environ is None else environ
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for role in ROLES:
        section = dict(data.get(role) or {})
        url = environ.get(f"FARMMIND_{role.upper()}_URL")
        if url:
            section["url"] = url
        key = environ.get(f"FARMMIND_{role.upper()}_API_KEY")
        if key:
            section["api_key"] = key
        data[role] = section
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    try:
        return PipelineConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _http_kwargs(section: Mapping) -> dict:
    kw = {
        "api_key": section.get("api_key"),
        "timeout": float(section.get("timeout", 60.0)),
        "rate_per_s": section.get("rate_per_s"),
        "max_concurrency": int(section.get("max_concurrency", 4)),
    }
    if "retry_attempts" in section:
        kw["retry"] = RetryPolicy(attempts=int(section["retry_attempts"]))
    return kw


def build_http_adapters(config: PipelineConfig) -> Adapters:
    for role in ROLES:
        if not getattr(config, role).get("url"):
            raise ConfigError(f"no endpoint configured for {role} (set {role}.url or FARMMIND_{role.upper()}_URL)")
    rqm = config.rqm
    if not rqm.get("model"):
        raise ConfigError("rqm.model is required")
    return Adapters(
        rqm=HttpRqmAdapter(rqm["url"], rqm["model"], int(rqm.get("max_tokens", 1024)), **_http_kwargs(rqm)),
        segmenter=HttpFsmAdapter(config.segmenter["url"], **_http_kwargs(config.segmenter)),
        refiner=HttpFsmAdapter(config.refiner["url"], **_http_kwargs(config.refiner)),
    )
