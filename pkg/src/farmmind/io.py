"""Reading and writing masks, confidence maps, images and geo sidecars.

Formats:

* binary mask: single-band 8-bit PNG, foreground 255, background 0
* confidence map: raw little-endian float32, row-major, with a JSON sidecar
  ``{"width": W, "height": H, "dtype": "f32le"}`` at ``<path>.json``
* geotransform: JSON sidecar ``{"origin_lon", "origin_lat", "px_w_deg", "px_h_deg"}``
"""
from __future__ import annotations

import base64
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import GeoTransform, RasterError, as_binary, as_confidence, as_image


def geo_sidecar_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".geo.json")


def meta_sidecar_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".meta.json")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_geo(image_path) -> GeoTransform:
    side = geo_sidecar_path(image_path)
    if not side.exists():
        raise FileNotFoundError(f"missing geo sidecar {side}")
    return GeoTransform.from_json(read_json(side))


def write_geo(image_path, geo: GeoTransform) -> None:
    write_json(geo_sidecar_path(image_path), geo.to_json())


# -- masks -------------------------------------------------------------------

def mask_to_png_bytes(mask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(as_binary(mask) * np.uint8(255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def write_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(mask_to_png_bytes(mask))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "1") else im)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    vals = np.unique(arr)
    if set(vals.tolist()) <= {0, 255}:
        return (arr == 255).astype(np.uint8)
    if set(vals.tolist()) <= {0, 1}:
        return arr.astype(np.uint8)
    raise RasterError(f"{path}: mask PNG must contain only 0/255 (or 0/1)")


# -- images ------------------------------------------------------------------

def image_to_png_bytes(image) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(as_image(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB")).copy()


def image_to_b64(image) -> str:
    return base64.b64encode(image_to_png_bytes(image)).decode("ascii")


def image_from_b64(text: str) -> np.ndarray:
    return image_from_png_bytes(base64.b64decode(text))


def write_image(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(image_to_png_bytes(image))


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


# -- confidence maps ---------------------------------------------------------

def confidence_to_bytes(conf) -> bytes:
    return as_confidence(conf).astype("<f4").tobytes()


def confidence_from_bytes(data: bytes, width: int, height: int) -> np.ndarray:
    if len(data) != 4 * width * height:
        raise RasterError(f"expected {4 * width * height} bytes of f32le, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4").reshape(height, width)
    return as_confidence(arr.astype(np.float64))


def write_confidence(path, conf) -> None:
    conf = as_confidence(conf)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(confidence_to_bytes(conf))
    write_json(p.with_name(p.name + ".json"),
               {"width": conf.shape[1], "height": conf.shape[0], "dtype": "f32le"})


def read_confidence(path) -> np.ndarray:
    p = Path(path)
    side = read_json(p.with_name(p.name + ".json"))
    if side.get("dtype") != "f32le":
        raise RasterError(f"unsupported confidence dtype {side.get('dtype')!r}")
    return confidence_from_bytes(p.read_bytes(), int(side["width"]), int(side["height"]))
