"""Unified (label, box, mask) annotation format and per-task adapters.

Every supported task -- instance, semantic, panoptic, foreground and
referring segmentation -- is converted into a list of :class:`SegmentRecord`
triplets, so all of them train through the same loss. Boxes are always
derived from masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    MixedQueryError,
    OverlapError,
    SizeMismatch,
    TooManyCaptions,
)
from .maskops import BBox, Rle, mask_to_bbox, rle_decode, rle_encode

TASKS = ("instance", "semantic", "panoptic", "foreground", "referring")
THING_STUFF = ("thing", "stuff", "unknown")
FOREGROUND_LABELS = ("foreground", "background")
MAX_CAPTIONS = 5


@lru_cache(maxsize=4096)
def _decode_cached(rle: Rle) -> np.ndarray:
    m = rle_decode(rle)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class SegmentRecord:
    label_text: str
    bbox: BBox
    mask: Rle
    thing_stuff: str = "unknown"
    caption_pool: tuple[str, ...] | None = None
    bbox_external: bool = False

    def __post_init__(self):
        if not self.label_text or not self.label_text.strip():
            raise MixedQueryError("label_text must be non-empty")
        if self.thing_stuff not in THING_STUFF:
            raise MixedQueryError(f"thing_stuff must be one of {THING_STUFF}, got {self.thing_stuff!r}")
        if self.caption_pool is not None:
            pool = tuple(self.caption_pool)
            if not 1 <= len(pool) <= MAX_CAPTIONS:
                raise TooManyCaptions(f"caption pool must hold 1-{MAX_CAPTIONS} texts, got {len(pool)}")
            object.__setattr__(self, "caption_pool", pool)

    def binary(self) -> np.ndarray:
        """Decoded mask (read-only, cached)."""
        return _decode_cached(self.mask)


def make_record(label_text: str, mask, thing_stuff: str = "unknown") -> SegmentRecord:
    """Build a record from a binary array or an RLE, deriving the box."""
    if isinstance(mask, Rle):
        rle = mask
        bits = _decode_cached(rle)
    else:
        bits = np.asarray(mask, dtype=bool)
        rle = rle_encode(bits)
    return SegmentRecord(label_text, mask_to_bbox(bits), rle, thing_stuff)


@dataclass(frozen=True)
class UnifiedAnnotation:
    image_id: str
    image_size: tuple[int, int]
    records: tuple[SegmentRecord, ...]
    task: str
    dataset_id: str = "default"
    ignore: Rle | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if self.task not in TASKS:
            raise MixedQueryError(f"unknown task {self.task!r}")
        h, w = self.image_size
        for r in self.records:
            if (r.mask.height, r.mask.width) != (h, w):
                raise SizeMismatch(
                    f"record {r.label_text!r} mask is {r.mask.height}x{r.mask.width}, image is {h}x{w}"
                )
        if self.ignore is not None and (self.ignore.height, self.ignore.width) != (h, w):
            raise SizeMismatch("ignore mask size differs from image size")
        if self.task == "panoptic":
            _check_disjoint([r.binary() for r in self.records])
        if self.task == "foreground":
            bad = [r.label_text for r in self.records if r.label_text not in FOREGROUND_LABELS]
            if bad:
                raise MixedQueryError(f"foreground labels must be {FOREGROUND_LABELS}, got {bad}")

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    def ignore_mask(self) -> np.ndarray:
        if self.ignore is None:
            return np.zeros(self.image_size, dtype=bool)
        return _decode_cached(self.ignore)


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    annotations: tuple[UnifiedAnnotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def __len__(self) -> int:
        return len(self.annotations)

    def __getitem__(self, i: int) -> UnifiedAnnotation:
        return self.annotations[i]

    @property
    def image_ids(self) -> list[str]:
        return [a.image_id for a in self.annotations]


def _check_disjoint(masks: Sequence[np.ndarray]) -> None:
    if not masks:
        return
    acc = np.zeros(masks[0].shape, dtype=np.int32)
    for m in masks:
        acc += m
    if acc.max(initial=0) > 1:
        raise OverlapError("panoptic segments overlap")


def _check_rle(rle: Rle, image_size) -> np.ndarray:
    if (rle.height, rle.width) != tuple(image_size):
        raise SizeMismatch(f"mask is {rle.height}x{rle.width}, image is {image_size[0]}x{image_size[1]}")
    return _decode_cached(rle)


def from_instance(image_size, instances: Iterable[tuple], image_id: str = "", dataset_id: str = "default") -> UnifiedAnnotation:
    """``instances`` holds ``(class_text, Rle)`` or ``(class_text, Rle, thing_stuff)``."""
    records = []
    for inst in instances:
        text, rle = inst[0], inst[1]
        tag = inst[2] if len(inst) > 2 else "unknown"
        bits = _check_rle(rle, image_size)
        records.append(SegmentRecord(text, mask_to_bbox(bits), rle, tag))
    return UnifiedAnnotation(image_id, image_size, records, "instance", dataset_id)


def from_semantic(image_size, label_map, ignore_label="ignore", image_id: str = "", dataset_id: str = "default") -> UnifiedAnnotation:
    """One record per distinct non-ignore class in ``label_map`` (order of first appearance)."""
    lm = np.asarray(label_map)
    if lm.shape != tuple(image_size):
        raise SizeMismatch(f"label map is {lm.shape}, image is {tuple(image_size)}")
    flat = lm.ravel()
    _, first = np.unique(flat, return_index=True)
    classes = [flat[i] for i in sorted(first)]
    records = []
    for c in classes:
        if c == ignore_label:
            continue
        bits = lm == c
        records.append(SegmentRecord(str(c), mask_to_bbox(bits), rle_encode(bits)))
    ignore = lm == ignore_label
    return UnifiedAnnotation(
        image_id, image_size, records, "semantic", dataset_id, rle_encode(ignore) if ignore.any() else None
    )


def from_panoptic(image_size, segments: Iterable[tuple], image_id: str = "", dataset_id: str = "default") -> UnifiedAnnotation:
    """``segments`` holds ``(class_text, Rle, thing_stuff)``; overlapping masks raise OverlapError."""
    records = []
    for text, rle, tag in segments:
        bits = _check_rle(rle, image_size)
        records.append(SegmentRecord(text, mask_to_bbox(bits), rle, tag or "unknown"))
    return UnifiedAnnotation(image_id, image_size, records, "panoptic", dataset_id)


def from_foreground(image_size, fg_mask: Rle, image_id: str = "", dataset_id: str = "default") -> UnifiedAnnotation:
    bits = _check_rle(fg_mask, image_size)
    records = []
    if bits.any():
        records.append(SegmentRecord("foreground", mask_to_bbox(bits), fg_mask, "unknown"))
    bg = ~bits
    if bg.any():
        records.append(SegmentRecord("background", mask_to_bbox(bg), rle_encode(bg), "stuff"))
    return UnifiedAnnotation(image_id, image_size, records, "foreground", dataset_id)


def from_referring(image_size, refs: Iterable[tuple[str, Rle]], image_id: str = "", dataset_id: str = "default") -> UnifiedAnnotation:
    records = []
    for caption, rle in refs:
        bits = _check_rle(rle, image_size)
        records.append(SegmentRecord(caption, mask_to_bbox(bits), rle))
    return UnifiedAnnotation(image_id, image_size, records, "referring", dataset_id)


def attach_synthetic_captions(ann: UnifiedAnnotation, captions: Mapping[int, Sequence[str]]) -> UnifiedAnnotation:
    """Give records a pool of synthetic captions; ``label_text`` stays as the fallback."""
    records = list(ann.records)
    for idx, texts in captions.items():
        idx = int(idx)
        if not 0 <= idx < len(records):
            raise IndexOutOfRange(f"record index {idx} out of range for {len(records)} records")
        texts = tuple(texts)
        if len(texts) > MAX_CAPTIONS:
            raise TooManyCaptions(f"record {idx}: {len(texts)} captions, at most {MAX_CAPTIONS} allowed")
        if not texts:
            raise MixedQueryError(f"record {idx}: caption list is empty")
        records[idx] = replace(records[idx], caption_pool=texts)
    return replace(ann, records=tuple(records))


def apply_exclusion(ds: Dataset, excluded_image_ids: Iterable[str]) -> Dataset:
    excluded = set(excluded_image_ids)
    return replace(ds, annotations=tuple(a for a in ds.annotations if a.image_id not in excluded))


# --- JSON-Lines I/O ---------------------------------------------------------


def record_to_json(r: SegmentRecord) -> dict:
    obj = {"label": r.label_text, "bbox": r.bbox.as_list(), "mask": r.mask.to_json(), "thing_stuff": r.thing_stuff}
    if r.caption_pool is not None:
        obj["caption_pool"] = list(r.caption_pool)
    if r.bbox_external:
        obj["bbox_external"] = True
    return obj


def record_from_json(obj: dict, keep_external_boxes: bool = False) -> SegmentRecord:
    rle = Rle.from_json(obj["mask"])
    derived = mask_to_bbox(_decode_cached(rle))
    bbox, external = derived, False
    if "bbox" in obj and keep_external_boxes:
        given = BBox(*obj["bbox"])
        if given != derived:
            if not given.contains(derived):
                raise MixedQueryError(f"external box {given.as_list()} does not contain mask box {derived.as_list()}")
            bbox, external = given, True
    pool = obj.get("caption_pool")
    return SegmentRecord(
        obj["label"], bbox, rle, obj.get("thing_stuff", "unknown"), tuple(pool) if pool else None, external
    )


def annotation_to_json(ann: UnifiedAnnotation) -> dict:
    obj = {
        "image_id": ann.image_id,
        "h": ann.height,
        "w": ann.width,
        "task": ann.task,
        "dataset_id": ann.dataset_id,
        "records": [record_to_json(r) for r in ann.records],
    }
    if ann.ignore is not None:
        obj["ignore"] = ann.ignore.to_json()
    return obj


def annotation_from_json(obj: dict, keep_external_boxes: bool = False) -> UnifiedAnnotation:
    ignore = Rle.from_json(obj["ignore"]) if obj.get("ignore") else None
    return UnifiedAnnotation(
        str(obj["image_id"]),
        (obj["h"], obj["w"]),
        tuple(record_from_json(r, keep_external_boxes) for r in obj["records"]),
        obj["task"],
        obj.get("dataset_id", "default"),
        ignore,
    )


def write_jsonl(path, annotations: Iterable[UnifiedAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(annotation_to_json(ann), separators=(",", ":")) + "\n")


def read_jsonl(path, keep_external_boxes: bool = False) -> list[UnifiedAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(annotation_from_json(json.loads(line), keep_external_boxes))
    return out


def load_dataset(path, dataset_id: str | None = None) -> Dataset:
    anns = read_jsonl(path)
    if dataset_id is None:
        dataset_id = anns[0].dataset_id if anns else Path(path).stem
    return Dataset(dataset_id, anns)
