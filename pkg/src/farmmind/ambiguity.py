"""Low-confidence region selection and box annotation for the reasoning model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import (
    Bbox,
    RasterError,
    as_image,
    binarize_confidence,
    bounding_box,
    label_connected_components,
)

RED = (255, 0, 0)


@dataclass(frozen=True)
class AmbiguityParams:
    """Selection knobs.

    A region is kept when its bounding-box area lies in
    ``[area_min, area_min + area_increment]`` (both ends inclusive).  The
    defaults are the threshold ``[-1, 1]`` and area range ``[5000, 100000]``.
    """

    threshold: float = 1.0
    area_min: int = 5000
    area_increment: int = 95000
    connectivity: int = 8

    def __post_init__(self):
        if not (self.threshold >= 0) or not math.isfinite(self.threshold):
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.area_min < 0 or self.area_increment < 0:
            raise ValueError("area_min and area_increment must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")

    @property
    def area_max(self) -> int:
        return self.area_min + self.area_increment


@dataclass(frozen=True)
class AmbiguityRegion:
    region_id: int
    bbox: Bbox
    bbox_area: int
    pixel_count: int
    source_patch_id: str = ""

    def to_dict(self) -> dict:
        return {
            "region_id": self.region_id,
            "bbox": self.bbox.as_list(),
            "bbox_area": self.bbox_area,
            "pixel_count": self.pixel_count,
            "source_patch_id": self.source_patch_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AmbiguityRegion":
        return cls(int(d["region_id"]), Bbox.from_list(d["bbox"]), int(d["bbox_area"]),
                   int(d["pixel_count"]), d.get("source_patch_id", ""))


def select_ambiguous_regions(conf, params: AmbiguityParams,
                             patch_id: str = "") -> list[AmbiguityRegion]:
    mask = binarize_confidence(conf, params.threshold)
    out = []
    for region in label_connected_components(mask, params.connectivity):
        box = bounding_box(region)
        if params.area_min <= box.area <= params.area_max:
            out.append(AmbiguityRegion(region.id, box, box.area, region.pixel_count, patch_id))
    return out


def outline_mask(shape: tuple[int, int], box: Bbox, stroke_px: int = 3) -> np.ndarray:
    """Boolean mask of the box outline, drawn inward from the box edges."""
    out = np.zeros(shape, dtype=bool)
    if stroke_px <= 0:
        return out
    s = stroke_px
    out[box.slices] = True
    inner_w, inner_h = box.width - 2 * s, box.height - 2 * s
    if inner_w > 0 and inner_h > 0:
        out[box.y_min + s:box.y_max - s, box.x_min + s:box.x_max - s] = False
    return out


def annotate_with_box(image, box: Bbox, stroke_px: int = 3, color=RED) -> np.ndarray:
    image = as_image(image)
    if stroke_px < 0:
        raise ValueError("stroke_px must be >= 0")
    if not box.within(image.shape):
        raise RasterError(f"box {box.as_list()} outside image of shape {image.shape[:2]}")
    out = image.copy()
    out[outline_mask(image.shape[:2], box, stroke_px)] = color
    return out
