"""Binary masks, COCO-style uncompressed RLE, boxes and overlap measures.

Masks are plain 2-D numpy arrays: ``bool`` for binary masks and floats in
[0, 1] for soft masks. Boxes use half-open pixel coordinates
``[x_min, x_max) x [y_min, y_max)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimMismatch, EmptyMask, SizeMismatch


@dataclass(frozen=True)
class Rle:
    """Uncompressed run-length encoding, column-major, starting with a 0-run."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.height < 1 or self.width < 1:
            raise SizeMismatch(f"mask size must be positive, got {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise SizeMismatch("run lengths must be non-negative")

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "Rle":
        return cls(int(obj["h"]), int(obj["w"]), tuple(obj["counts"]))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have positive area: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains(self, other: "BBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def to_cxcywh(self, height: int, width: int) -> np.ndarray:
        """Normalized ``(cx, cy, w, h)`` relative to an image of the given size."""
        return np.array(
            [
                (self.x_min + self.x_max) / 2.0 / width,
                (self.y_min + self.y_max) / 2.0 / height,
                (self.x_max - self.x_min) / width,
                (self.y_max - self.y_min) / height,
            ]
        )


def as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise SizeMismatch(f"binary mask must be a non-empty 2-D array, got shape {m.shape}")
    return m.astype(bool, copy=False)


def rle_encode(mask) -> Rle:
    m = as_binary(mask)
    h, w = m.shape
    flat = m.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return Rle(h, w, tuple(counts))


def rle_decode(rle: Rle) -> np.ndarray:
    h, w = rle.height, rle.width
    total = sum(rle.counts)
    if total != h * w:
        raise SizeMismatch(f"RLE counts sum to {total}, expected {h * w} for {h}x{w}")
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape((w, h)).T.copy()


def mask_to_bbox(mask) -> BBox:
    m = as_binary(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("cannot derive a box from an empty mask")
    cols = np.flatnonzero(m.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def mask_iou(a, b) -> float:
    a = as_binary(a)
    b = as_binary(b)
    if a.shape != b.shape:
        raise DimMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _box_terms(a: Sequence[float], b: Sequence[float]):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclose


def _corners(box) -> tuple[float, float, float, float]:
    if isinstance(box, BBox):
        return box.x_min, box.y_min, box.x_max, box.y_max
    x0, y0, x1, y1 = (float(v) for v in box)
    return x0, y0, x1, y1


def bbox_iou(a, b) -> float:
    inter, union, _ = _box_terms(_corners(a), _corners(b))
    return inter / union


def bbox_giou(a, b) -> float:
    inter, union, enclose = _box_terms(_corners(a), _corners(b))
    return inter / union - (enclose - union) / enclose


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def cell_index(size: int, grid: int) -> np.ndarray:
    """Map each of ``size`` pixels to one of ``grid`` cells (nearest-cell rule)."""
    return (np.arange(size) * grid) // size


def downsample_majority(mask, grid_h: int, grid_w: int) -> np.ndarray:
    """Area-majority downsampling to a ``grid_h x grid_w`` raster.

    A cell is set when at least half of the pixels it covers are set.
    """
    m = as_binary(mask).astype(float)
    h, w = m.shape
    ri = cell_index(h, grid_h)
    ci = cell_index(w, grid_w)
    sums = np.zeros((grid_h, grid_w))
    np.add.at(sums, (ri[:, None], ci[None, :]), m)
    counts = np.zeros((grid_h, grid_w))
    np.add.at(counts, (ri[:, None], ci[None, :]), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return frac >= 0.5


def upsample_nearest(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of the :func:`cell_index` mapping: broadcast cells back to pixels."""
    gh, gw = values.shape[-2:]
    return values[..., cell_index(height, gh)[:, None], cell_index(width, gw)[None, :]]
