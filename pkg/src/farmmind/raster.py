"""Pixel-grid algebra shared by every stage of the pipeline.

Rasters are plain numpy arrays indexed ``[row, col]``:

* confidence maps are 2-D float64 arrays of finite, signed, logit-like scores
* binary masks are 2-D uint8 arrays with entries in {0, 1}
* int masks (results of mask arithmetic) are 2-D int8 arrays in {-1, 0, 1, 2}
* images are ``(H, W, 3)`` uint8 arrays

Pixel coordinates are written ``(x, y) == (col, row)`` with the origin at the
top-left corner, and boxes are half-open: ``[x_min, x_max) x [y_min, y_max)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

# Ties between equidistant pixel centres resolve towards the higher index.
_NEAREST_EPS = 1e-9


class RasterError(ValueError):
    pass


class RegistrationError(RasterError):
    pass


# ---------------------------------------------------------------------------
# validation


def as_confidence(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise RasterError(f"confidence map must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RasterError("confidence map contains non-finite values")
    return arr


def as_binary(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.size == 0:
        raise RasterError(f"binary mask must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise RasterError("binary mask has entries outside {0, 1}")
    return arr.astype(np.uint8)


def as_intmask(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.size == 0:
        raise RasterError(f"int mask must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer) and arr.dtype != bool:
        raise RasterError(f"int mask must hold integers, got {arr.dtype}")
    if arr.min() < -1 or arr.max() > 2:
        raise RasterError("int mask has entries outside {-1, 0, 1, 2}")
    return arr.astype(np.int8)


def as_image(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise RasterError(f"image must be an (H, W, 3) array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise RasterError(f"image must be uint8, got {arr.dtype}")
    return arr


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Bbox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise RasterError(f"Bbox.{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise RasterError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def slices(self) -> tuple[slice, slice]:
        """``(row_slice, col_slice)`` for indexing a numpy raster."""
        return slice(self.y_min, self.y_max), slice(self.x_min, self.x_max)

    def within(self, shape: tuple[int, ...]) -> bool:
        h, w = shape[0], shape[1]
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= w and self.y_max <= h

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, seq) -> "Bbox":
        x0, y0, x1, y1 = seq
        return cls(int(x0), int(y0), int(x1), int(y1))


@dataclass(frozen=True)
class GeoBox:
    """Lon/lat rectangle in degrees."""

    west: float
    south: float
    east: float
    north: float

    def __post_init__(self):
        vals = (self.west, self.south, self.east, self.north)
        if not all(math.isfinite(v) for v in vals):
            raise RasterError(f"non-finite geo box {vals}")
        if not (self.west < self.east and self.south < self.north):
            raise RasterError(f"degenerate geo box {vals}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.west + self.east) / 2.0, (self.south + self.north) / 2.0

    def scaled(self, factor: float) -> "GeoBox":
        cx, cy = self.center
        hw = (self.east - self.west) * factor / 2.0
        hh = (self.north - self.south) * factor / 2.0
        return GeoBox(cx - hw, cy - hh, cx + hw, cy + hh)

    def contains(self, other: "GeoBox", tol: float = 0.0) -> bool:
        return (
            other.west >= self.west - tol
            and other.east <= self.east + tol
            and other.south >= self.south - tol
            and other.north <= self.north + tol
        )

    def intersects(self, other: "GeoBox") -> bool:
        return (
            other.west < self.east
            and other.east > self.west
            and other.south < self.north
            and other.north > self.south
        )

    def as_list(self) -> list[float]:
        return [self.west, self.south, self.east, self.north]

    @classmethod
    def from_list(cls, seq) -> "GeoBox":
        w, s, e, n = seq
        return cls(float(w), float(s), float(e), float(n))


@dataclass(frozen=True)
class GeoTransform:
    """Affine map from pixel ``(col, row)`` to ``(lon, lat)``.

    ``pixel_height_deg`` is negative for north-up rasters.
    """

    origin_lon: float
    origin_lat: float
    pixel_width_deg: float
    pixel_height_deg: float

    def __post_init__(self):
        if not (self.pixel_width_deg > 0):
            raise RasterError("pixel_width_deg must be positive")
        if self.pixel_height_deg == 0 or not math.isfinite(self.pixel_height_deg):
            raise RasterError("pixel_height_deg must be finite and non-zero")

    def pixel_to_geo(self, col, row):
        return (
            self.origin_lon + np.asarray(col) * self.pixel_width_deg,
            self.origin_lat + np.asarray(row) * self.pixel_height_deg,
        )

    def geo_to_pixel(self, lon, lat):
        """Fractional pixel coordinates; pixel ``i`` spans ``[i, i + 1)``."""
        return (
            (np.asarray(lon) - self.origin_lon) / self.pixel_width_deg,
            (np.asarray(lat) - self.origin_lat) / self.pixel_height_deg,
        )

    def footprint(self, width: int, height: int) -> GeoBox:
        return self.box_to_geo(Bbox(0, 0, width, height))

    def box_to_geo(self, box: Bbox) -> GeoBox:
        lon0, lat0 = self.pixel_to_geo(box.x_min, box.y_min)
        lon1, lat1 = self.pixel_to_geo(box.x_max, box.y_max)
        return GeoBox(
            float(min(lon0, lon1)), float(min(lat0, lat1)),
            float(max(lon0, lon1)), float(max(lat0, lat1)),
        )

    def for_box(self, box: GeoBox, width: int, height: int) -> "GeoTransform":
        """Transform of a ``width x height`` grid spanning ``box`` with this orientation."""
        pw = (box.east - box.west) / width
        ph = (box.north - box.south) / height
        if self.pixel_height_deg < 0:
            return GeoTransform(box.west, box.north, pw, -ph)
        return GeoTransform(box.west, box.south, pw, ph)

    def to_json(self) -> dict:
        return {
            "origin_lon": self.origin_lon,
            "origin_lat": self.origin_lat,
            "px_w_deg": self.pixel_width_deg,
            "px_h_deg": self.pixel_height_deg,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeoTransform":
        return cls(float(d["origin_lon"]), float(d["origin_lat"]), float(d["px_w_deg"]), float(d["px_h_deg"]))


# ---------------------------------------------------------------------------
# binarization and connected components


def binarize_confidence(conf, threshold: float) -> np.ndarray:
    """1 where the score lies in ``[-threshold, threshold]``, else 0."""
    if not (threshold >= 0) or not math.isfinite(threshold):
        raise RasterError(f"threshold must be a finite non-negative number, got {threshold}")
    conf = as_confidence(conf)
    return (np.abs(conf) <= threshold).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Region:
    """A connected set of foreground pixels. ``rows``/``cols`` are in raster order."""

    id: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)

    @property
    def pixels(self) -> set[tuple[int, int]]:
        return {(int(x), int(y)) for x, y in zip(self.cols, self.rows)}

    @classmethod
    def from_pixels(cls, id: int, pixels: Iterable[tuple[int, int]]) -> "Region":
        pts = sorted(set(pixels), key=lambda p: (p[1], p[0]))
        cols = np.array([p[0] for p in pts], dtype=np.intp)
        rows = np.array([p[1] for p in pts], dtype=np.intp)
        return cls(id, rows, cols)


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def label_connected_components(mask, connectivity: int = 8) -> list[Region]:
    """Connected regions of 1-pixels, ids ``1..K`` in first-encounter raster order."""
    if connectivity not in _STRUCTURES:
        raise RasterError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = as_binary(mask)
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    lab = flat[fg]
    # relabel by first appearance so the id contract never depends on scipy internals
    _, first = np.unique(lab, return_index=True)
    order_of_label = np.empty(n + 1, dtype=np.intp)
    order_of_label[lab[np.sort(first)]] = np.arange(1, n + 1)
    new = order_of_label[lab]
    sort = np.argsort(new, kind="stable")
    counts = np.bincount(new, minlength=n + 1)[1:]
    splits = np.cumsum(counts)[:-1]
    width = mask.shape[1]
    regions = []
    for i, chunk in enumerate(np.split(fg[sort], splits), start=1):
        rows, cols = np.divmod(chunk, width)
        regions.append(Region(i, rows, cols))
    return regions


def bounding_box(region: Region) -> Bbox:
    if region.pixel_count == 0:
        raise RasterError("bounding box of an empty region")
    return Bbox(
        int(region.cols.min()), int(region.rows.min()),
        int(region.cols.max()) + 1, int(region.rows.max()) + 1,
    )


# ---------------------------------------------------------------------------
# mask arithmetic


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise RasterError(f"dimension mismatch: {a.shape} vs {b.shape}")


def mask_add(a, b) -> np.ndarray:
    a, b = as_binary(a), as_binary(b)
    _check_same_shape(a, b)
    return a.astype(np.int8) + b.astype(np.int8)


def mask_subtract(a, b) -> np.ndarray:
    a, b = as_binary(a), as_binary(b)
    _check_same_shape(a, b)
    return a.astype(np.int8) - b.astype(np.int8)


def clamp_binary(m) -> np.ndarray:
    """Binary remapping ``min(max(0, m), 1)``."""
    m = as_intmask(m)
    return np.minimum(np.maximum(0, m), 1).astype(np.uint8)


# ---------------------------------------------------------------------------
# crop / paste


def crop(raster, box: Bbox) -> np.ndarray:
    raster = np.asarray(raster)
    if not box.within(raster.shape):
        raise RasterError(f"box {box.as_list()} outside raster of shape {raster.shape[:2]}")
    return raster[box.slices].copy()


def paste(raster, box: Bbox, values) -> np.ndarray:
    """Copy of ``raster`` with ``values`` written into ``box``."""
    out = np.array(raster, copy=True)
    if not box.within(out.shape):
        raise RasterError(f"box {box.as_list()} outside raster of shape {out.shape[:2]}")
    out[box.slices] = values
    return out


# ---------------------------------------------------------------------------
# geographic resampling


def nearest_index(frac) -> np.ndarray:
    """Index of the pixel whose centre is nearest to fractional coordinate ``frac``."""
    return np.floor(np.asarray(frac) + _NEAREST_EPS).astype(np.int64)


def sample_nearest(src: np.ndarray, src_geo: GeoTransform, dst_geo: GeoTransform,
                   dst_shape: tuple[int, int], fill=0,
                   box: Bbox | None = None) -> np.ndarray:
    """Nearest-neighbour resample of ``src`` onto a ``dst_shape`` grid.

    Destination pixels whose centre falls outside ``src`` get ``fill``.  When
    ``box`` is given only pixels inside it are sampled; the rest get ``fill``.
    """
    h, w = dst_shape
    out = np.full((h, w) + src.shape[2:], fill, dtype=src.dtype)
    if box is None:
        box = Bbox(0, 0, w, h)
    cols = np.arange(box.x_min, box.x_max) + 0.5
    rows = np.arange(box.y_min, box.y_max) + 0.5
    lon, _ = dst_geo.pixel_to_geo(cols, 0.0)
    _, lat = dst_geo.pixel_to_geo(0.0, rows)
    u, _ = src_geo.geo_to_pixel(lon, src_geo.origin_lat)
    _, v = src_geo.geo_to_pixel(src_geo.origin_lon, lat)
    ci = nearest_index(u)
    ri = nearest_index(v)
    col_ok = (ci >= 0) & (ci < src.shape[1])
    row_ok = (ri >= 0) & (ri < src.shape[0])
    sub = np.full((rows.size, cols.size) + src.shape[2:], fill, dtype=src.dtype)
    sub[np.ix_(row_ok, col_ok)] = src[np.ix_(ri[row_ok], ci[col_ok])]
    out[box.slices] = sub
    return out


def register_mask(aux_mask, aux_geo: GeoTransform, target_geo: GeoTransform,
                  target_shape: tuple[int, int], restrict_to: Bbox) -> np.ndarray:
    """Bring ``aux_mask`` onto the target grid, writing only inside ``restrict_to``.

    ``target_shape`` is ``(height, width)``.
    """
    aux_mask = as_binary(aux_mask)
    if not restrict_to.within(target_shape):
        raise RasterError(f"restrict_to {restrict_to.as_list()} outside target of shape {target_shape}")
    aux_fp = aux_geo.footprint(aux_mask.shape[1], aux_mask.shape[0])
    if not aux_fp.intersects(target_geo.box_to_geo(restrict_to)):
        raise RegistrationError("auxiliary mask does not overlap the restricted region")
    return sample_nearest(aux_mask, aux_geo, target_geo, target_shape, fill=0, box=restrict_to)
