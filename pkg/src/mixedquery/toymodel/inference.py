"""Prediction and task-specific post-processing.

Predictions are drawn from the whole query pool; neither query provenance
nor thing/stuff tags are consulted anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import DecoderOutputs, sigmoid
from ..maskops import upsample_nearest
from ..metrics import Segment
from ..semantics import embed_bank
from .model import ToyModel


@dataclass
class QueryPrediction:
    query: int
    label: str
    score: float
    label_scores: np.ndarray  # over the text bank
    box: np.ndarray  # normalized cxcywh
    soft_mask: np.ndarray  # image resolution, values in (0, 1)


def query_scores(outputs: DecoderOutputs, text_bank: np.ndarray) -> np.ndarray:
    """Q x T sigmoid class scores."""
    return sigmoid(outputs.class_embeds @ text_bank.T)


def soft_masks(outputs: DecoderOutputs, image_size) -> np.ndarray:
    """Q x H x W mask probabilities, nearest-upsampled from the grid."""
    d, gh, gw = outputs.pixel_features.shape
    probs = sigmoid(outputs.mask_logits()).reshape(-1, gh, gw)
    return upsample_nearest(probs, *image_size)


def run(model: ToyModel, params, image: np.ndarray) -> DecoderOutputs:
    out, _ = model.forward(image, params)
    return out


def predict(model: ToyModel, params, image: np.ndarray, labels, image_size, score_threshold: float = 0.5) -> list[QueryPrediction]:
    """Queries whose best label score exceeds ``score_threshold``, in query order."""
    labels = tuple(labels)
    out = run(model, params, image)
    scores = query_scores(out, embed_bank(labels, model.cfg.d_text))
    best = scores.argmax(axis=1)
    top = scores[np.arange(len(best)), best]
    masks = soft_masks(out, image_size)
    preds = []
    for q in np.flatnonzero(top > score_threshold):
        preds.append(QueryPrediction(int(q), labels[best[q]], float(top[q]), scores[q], out.boxes[q], masks[q]))
    return preds


def instance_segments(preds: list[QueryPrediction], mask_threshold: float = 0.5) -> list[Segment]:
    return [Segment(p.label, p.soft_mask > mask_threshold, p.score) for p in preds]


def panoptic_segments(preds: list[QueryPrediction], score_threshold: float = 0.5, overlap_threshold: float = 0.8) -> list[Segment]:
    """Disjoint segments: each pixel goes to the query maximizing score x mask probability.

    A query keeps its segment only if it retains at least ``overlap_threshold``
    of its own binarized mask; segments of the same label are not merged.
    """
    kept = [p for p in preds if p.score > score_threshold]
    if not kept:
        return []
    prob = np.stack([p.soft_mask for p in kept])
    weighted = prob * np.array([p.score for p in kept])[:, None, None]
    owner = weighted.argmax(axis=0)
    segments = []
    for i, p in enumerate(kept):
        own = (owner == i) & (prob[i] > 0.5)
        full = prob[i] > 0.5
        if not own.any() or own.sum() < overlap_threshold * full.sum():
            continue
        segments.append(Segment(p.label, own, p.score))
    return segments


def semantic_map(model: ToyModel, params, image: np.ndarray, labels, image_size) -> np.ndarray:
    """Per-pixel label maximizing sum over queries of class score x mask probability."""
    labels = tuple(labels)
    out = run(model, params, image)
    scores = query_scores(out, embed_bank(labels, model.cfg.d_text))  # Q x T
    masks = soft_masks(out, image_size)  # Q x H x W
    per_class = np.einsum("qt,qhw->thw", scores, masks)
    return np.array(labels, dtype=object)[per_class.argmax(axis=0)]


def referring_masks(model: ToyModel, params, image: np.ndarray, captions, image_size, mask_threshold: float = 0.5) -> list[np.ndarray]:
    """For each caption, the binarized mask of the query scoring highest on it."""
    out = run(model, params, image)
    scores = query_scores(out, embed_bank(tuple(captions), model.cfg.d_text))
    masks = soft_masks(out, image_size)
    return [masks[scores[:, t].argmax()] > mask_threshold for t in range(scores.shape[1])]


def foreground_soft_mask(model: ToyModel, params, image: np.ndarray, image_size) -> np.ndarray:
    """Soft foreground map: score-weighted average of the query masks for "foreground"."""
    out = run(model, params, image)
    scores = query_scores(out, embed_bank(("foreground", "background"), model.cfg.d_text))
    masks = soft_masks(out, image_size)
    fg = np.einsum("q,qhw->hw", scores[:, 0], masks)
    bg = np.einsum("q,qhw->hw", scores[:, 1], masks)
    total = fg + bg
    return np.divide(fg, total, out=np.zeros_like(fg), where=total > 0)
