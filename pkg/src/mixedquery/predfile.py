"""Prediction files and decoder-output dumps (JSON-Lines).

A prediction line mirrors a unified annotation line, with a ``score`` on
every record::

    {"image_id": ..., "h": H, "w": W, "task": ..., "dataset_id": ...,
     "records": [{"label": ..., "score": s, "mask": {"h","w","counts"},
                  "bbox": [x0, y0, x1, y1] | null, "query": q}]}

Foreground predictions carry a soft map instead of (or next to) the mask:
``"soft": {"h": H, "w": W, "values": [row-major floats]}``.

A decoder dump line holds the raw per-query outputs of one image plus the
provenance of every query, which is what ``match-stats`` needs::

    {"image_id": ..., "provenance": [...], "class_embeds": [[...]],
     "boxes": [[cx, cy, w, h]], "mask_embeds": [[...]],
     "pixel_features": {"shape": [d, H', W'], "data": [...]}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import DecoderOutputs
from .maskops import Rle, mask_to_bbox, rle_decode, rle_encode
from .matching import Provenance
from .metrics import Segment


@dataclass
class PredictedImage:
    image_id: str
    image_size: tuple[int, int]
    task: str
    dataset_id: str
    segments: list[Segment] = field(default_factory=list)
    soft: np.ndarray | None = None


def segment_to_json(seg: Segment, query: int | None = None) -> dict:
    bbox = mask_to_bbox(seg.mask).as_list() if seg.mask.any() else None
    obj = {"label": seg.label, "score": float(seg.score), "mask": rle_encode(seg.mask).to_json(), "bbox": bbox}
    if query is not None:
        obj["query"] = int(query)
    return obj


def prediction_to_json(p: PredictedImage, queries=None) -> dict:
    queries = queries or [None] * len(p.segments)
    obj = {
        "image_id": p.image_id,
        "h": p.image_size[0],
        "w": p.image_size[1],
        "task": p.task,
        "dataset_id": p.dataset_id,
        "records": [segment_to_json(s, q) for s, q in zip(p.segments, queries)],
    }
    if p.soft is not None:
        obj["soft"] = {"h": p.image_size[0], "w": p.image_size[1], "values": p.soft.ravel().tolist()}
    return obj


def prediction_from_json(obj: dict) -> PredictedImage:
    size = (int(obj["h"]), int(obj["w"]))
    segs = []
    for r in obj.get("records", []):
        segs.append(Segment(r["label"], rle_decode(Rle.from_json(r["mask"])), float(r.get("score", 1.0))))
    soft = None
    if obj.get("soft"):
        s = obj["soft"]
        soft = np.asarray(s["values"], dtype=float).reshape(int(s["h"]), int(s["w"]))
    return PredictedImage(str(obj["image_id"]), size, obj.get("task", ""), obj.get("dataset_id", "default"), segs, soft)


def write_predictions(path, predictions, queries_per_image=None) -> None:
    queries_per_image = queries_per_image or [None] * len(predictions)
    with open(path, "w", encoding="utf-8") as fh:
        for p, qs in zip(predictions, queries_per_image):
            fh.write(json.dumps(prediction_to_json(p, qs), separators=(",", ":")) + "\n")


def read_predictions(path) -> list[PredictedImage]:
    with open(path, encoding="utf-8") as fh:
        return [prediction_from_json(json.loads(line)) for line in fh if line.strip()]


def dump_to_json(image_id: str, outputs: DecoderOutputs, provenance: Provenance) -> dict:
    return {
        "image_id": image_id,
        "provenance": list(provenance.tags),
        "class_embeds": outputs.class_embeds.tolist(),
        "boxes": outputs.boxes.tolist(),
        "mask_embeds": outputs.mask_embeds.tolist(),
        "pixel_features": {"shape": list(outputs.pixel_features.shape), "data": outputs.pixel_features.ravel().tolist()},
    }


def dump_from_json(obj: dict) -> tuple[str, DecoderOutputs, Provenance]:
    pf = obj["pixel_features"]
    outputs = DecoderOutputs(
        np.asarray(obj["class_embeds"], dtype=float),
        np.asarray(obj["boxes"], dtype=float),
        np.asarray(obj["mask_embeds"], dtype=float),
        np.asarray(pf["data"], dtype=float).reshape(pf["shape"]),
    )
    return str(obj["image_id"]), outputs, Provenance(tuple(obj["provenance"]))


def read_dumps(path) -> list[tuple[str, DecoderOutputs, Provenance]]:
    with open(path, encoding="utf-8") as fh:
        return [dump_from_json(json.loads(line)) for line in fh if line.strip()]
