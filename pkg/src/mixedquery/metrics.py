"""Evaluation: panoptic quality, COCO-style mask AP, mIoU and foreground MSE."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimMismatch, OverlapError
from .maskops import as_binary, bbox_iou, mask_to_bbox

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# thresholds like 0.55 are not exactly representable; an IoU that equals one
# in exact arithmetic must still pass it
_THRESH_SLACK = 1e-12


@dataclass(frozen=True)
class Segment:
    """A labelled mask; ``score`` is ignored for ground truth."""

    label: str
    mask: np.ndarray
    score: float = 1.0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def as_segments(items) -> list[Segment]:
    """Accept Segments, ``(label, mask[, score])`` tuples, or an annotation's records."""
    records = getattr(items, "records", None)
    if records is not None:
        return [Segment(r.label_text, r.binary(), getattr(r, "score", 1.0)) for r in records]
    out = []
    for it in items:
        if isinstance(it, Segment):
            out.append(it)
        elif hasattr(it, "label_text"):
            out.append(Segment(it.label_text, it.binary(), getattr(it, "score", 1.0)))
        else:
            label, mask, *rest = it
            out.append(Segment(label, as_binary(mask), float(rest[0]) if rest else 1.0))
    return out


@dataclass
class MetricReport:
    pq: float | None = None
    sq: float | None = None
    rq: float | None = None
    mask_ap: float | None = None
    ap_per_threshold: dict = field(default_factory=dict)
    miou: float | None = None
    mse: float | None = None
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {}
        for k in ("pq", "sq", "rq", "mask_ap", "miou", "mse"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        if self.ap_per_threshold:
            out["ap_per_threshold"] = {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()}
        if self.per_class:
            out["per_class"] = self.per_class
        return out


# --- panoptic quality -----------------------------------------------------------


def _check_disjoint(segs: Sequence[Segment]) -> None:
    if not segs:
        return
    acc = np.zeros(segs[0].mask.shape, dtype=np.int32)
    for s in segs:
        acc += s.mask
    if acc.max(initial=0) > 1:
        raise OverlapError("predicted panoptic segments overlap")


def panoptic_quality(preds: Sequence, gts: Sequence, unlabeled_is_void: bool = True):
    """PQ, SQ, RQ averaged over classes, plus a per-class table.

    ``preds`` and ``gts`` are per-image sequences of segments. A prediction
    and ground truth of the same class match when IoU > 0.5. Pixels no ground
    truth covers are void: they are removed from the union, and predictions
    lying mostly in void are not counted as false positives.
    """
    if len(preds) != len(gts):
        raise DimMismatch(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    stats = defaultdict(lambda: {"iou": 0.0, "tp": 0, "fp": 0, "fn": 0})
    for pred_img, gt_img in zip(preds, gts):
        void = None
        if hasattr(gt_img, "ignore_mask"):
            void = gt_img.ignore_mask().copy()
        ps = as_segments(pred_img)
        gs = as_segments(gt_img)
        _check_disjoint(ps)
        shape = gs[0].mask.shape if gs else (ps[0].mask.shape if ps else None)
        if shape is None:
            continue
        if void is None:
            void = np.zeros(shape, dtype=bool)
        if unlabeled_is_void:
            covered = np.zeros(shape, dtype=bool)
            for g in gs:
                covered |= g.mask
            void |= ~covered
        for s in ps + gs:
            if s.mask.shape != shape:
                raise DimMismatch(f"segment shape {s.mask.shape} differs from {shape}")
        gt_matched = [False] * len(gs)
        pred_matched = [False] * len(ps)
        for gi, g in enumerate(gs):
            for pi, p in enumerate(ps):
                if pred_matched[pi] or p.label != g.label:
                    continue
                inter = np.count_nonzero(g.mask & p.mask)
                if inter == 0:
                    continue
                union = g.area + p.area - inter - np.count_nonzero(p.mask & void)
                iou = inter / union
                if iou > 0.5:
                    gt_matched[gi] = pred_matched[pi] = True
                    stats[g.label]["iou"] += iou
                    stats[g.label]["tp"] += 1
                    break
        for gi, g in enumerate(gs):
            if not gt_matched[gi]:
                stats[g.label]["fn"] += 1
        for pi, p in enumerate(ps):
            if pred_matched[pi]:
                continue
            if p.area and np.count_nonzero(p.mask & void) / p.area > 0.5:
                continue
            stats[p.label]["fp"] += 1

    per_class = {}
    for label in sorted(stats):
        s = stats[label]
        tp, fp, fn = s["tp"], s["fp"], s["fn"]
        if tp + fp + fn == 0:
            continue
        sq = s["iou"] / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_class[label] = {"pq": sq * rq, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn}
    if not per_class:
        return None, None, None, per_class
    n = len(per_class)
    pq = sum(c["pq"] for c in per_class.values()) / n
    sq = sum(c["sq"] for c in per_class.values()) / n
    rq = sum(c["rq"] for c in per_class.values()) / n
    return pq, sq, rq, per_class


# --- average precision ------------------------------------------------------------


def _iou_matrix(preds: Sequence[Segment], gts: Sequence[Segment], use_boxes: bool) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    if use_boxes:
        pb = [mask_to_bbox(p.mask) if p.area else None for p in preds]
        gb = [mask_to_bbox(g.mask) for g in gts]
        for i, a in enumerate(pb):
            for j, b in enumerate(gb):
                out[i, j] = bbox_iou(a, b) if a is not None else 0.0
        return out
    if not preds or not gts:
        return out
    pm = np.stack([p.mask.ravel() for p in preds]).astype(np.int64)
    gm = np.stack([g.mask.ravel() for g in gts]).astype(np.int64)
    inter = pm @ gm.T
    union = pm.sum(1)[:, None] + gm.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def greedy_match(scores: Sequence[float], ious: np.ndarray, threshold: float) -> list[int]:
    """COCO matching for one image: returns the matched GT per prediction (-1 if none).

    Predictions are visited by descending score (stable on ties); each takes
    the unmatched ground truth of highest IoU at or above ``threshold``,
    lowest index on ties.
    """
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    taken = np.zeros(ious.shape[1], dtype=bool)
    result = [-1] * len(scores)
    for i in order:
        best, best_iou = -1, -1.0
        for j in range(ious.shape[1]):
            if taken[j] or ious[i, j] < threshold - _THRESH_SLACK:
                continue
            if ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            taken[best] = True
            result[i] = best
    return result


def average_precision(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP for detections already sorted by score."""
    tp = np.asarray(tp_flags, dtype=float)
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS - _THRESH_SLACK, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


def mask_ap(preds: Sequence, gts: Sequence, thresholds: Sequence[float] = IOU_THRESHOLDS, use_boxes: bool = False, max_dets: int = 100):
    """COCO mask AP (or box AP with ``use_boxes``).

    Returns ``(ap, per_threshold, per_class)``; ``ap`` is the mean over
    classes that have ground truth and over ``thresholds``, ``None`` when no
    class has ground truth.
    """
    if len(preds) != len(gts):
        raise DimMismatch(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    images = []
    classes = set()
    for pred_img, gt_img in zip(preds, gts):
        ps = as_segments(pred_img)
        order = np.argsort(-np.array([p.score for p in ps]), kind="stable")[:max_dets]
        ps = [ps[i] for i in sorted(order)]
        gs = as_segments(gt_img)
        classes.update(g.label for g in gs)
        images.append((ps, gs))
    classes = sorted(classes)
    if not classes:
        return None, {}, {}

    table = np.zeros((len(thresholds), len(classes)))
    for ci, label in enumerate(classes):
        per_img = []
        num_gt = 0
        for img_idx, (ps, gs) in enumerate(images):
            pc = [p for p in ps if p.label == label]
            gc = [g for g in gs if g.label == label]
            num_gt += len(gc)
            per_img.append((pc, _iou_matrix(pc, gc, use_boxes)))
        for ti, t in enumerate(thresholds):
            dets = []  # (score, image, local index, is_tp)
            for img_idx, (pc, ious) in enumerate(per_img):
                matched = greedy_match([p.score for p in pc], ious, t)
                for k, p in enumerate(pc):
                    dets.append((p.score, img_idx, k, matched[k] >= 0))
            dets.sort(key=lambda d: (-d[0], d[1], d[2]))
            table[ti, ci] = average_precision([d[3] for d in dets], num_gt)

    per_threshold = {t: float(table[ti].mean()) for ti, t in enumerate(thresholds)}
    per_class = {label: float(table[:, ci].mean()) for ci, label in enumerate(classes)}
    return float(table.mean()), per_threshold, per_class


# --- semantic / referring / foreground -----------------------------------------------


class ConfusionAccumulator:
    """Per-class intersection and union counts summed over images."""

    def __init__(self, ignore_label=None):
        self.ignore_label = ignore_label
        self.inter = defaultdict(int)
        self.union = defaultdict(int)

    def update(self, pred_map, gt_map) -> None:
        pred = np.asarray(pred_map)
        gt = np.asarray(gt_map)
        if pred.shape != gt.shape:
            raise DimMismatch(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
        keep = np.ones(gt.shape, dtype=bool) if self.ignore_label is None else gt != self.ignore_label
        p = pred[keep]
        g = gt[keep]
        labels = set(np.unique(g).tolist()) | set(np.unique(p).tolist())
        labels.discard(self.ignore_label)
        for c in labels:
            pc = p == c
            gc = g == c
            self.inter[c] += int(np.count_nonzero(pc & gc))
            self.union[c] += int(np.count_nonzero(pc | gc))

    def result(self):
        per_class = {str(c): self.inter[c] / self.union[c] for c in sorted(self.union, key=str) if self.union[c] > 0}
        if not per_class:
            return None, per_class
        return sum(per_class.values()) / len(per_class), per_class


def mean_iou(pred_label_map, gt_label_map, ignore_label=None):
    """mIoU over classes present in either map; ignore-labelled GT pixels do not count."""
    acc = ConfusionAccumulator(ignore_label)
    acc.update(pred_label_map, gt_label_map)
    return acc.result()


def cumulative_iou(pairs: Iterable[tuple]) -> float | None:
    """Overall IoU of binary (pred, gt) mask pairs: total intersection / total union."""
    inter = union = 0
    for pred, gt in pairs:
        p, g = as_binary(pred), as_binary(gt)
        if p.shape != g.shape:
            raise DimMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
        inter += int(np.count_nonzero(p & g))
        union += int(np.count_nonzero(p | g))
    return inter / union if union else None


def foreground_mse(pred, gt) -> float:
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise DimMismatch(f"shapes differ: {p.shape} vs {g.shape}")
    return float(np.mean((p - g) ** 2))


def rasterize_labels(segments, image_size, fill="") -> np.ndarray:
    """Paint segment labels into an object array; later segments overwrite earlier ones."""
    out = np.full(tuple(image_size), fill, dtype=object)
    for s in as_segments(segments):
        out[s.mask] = s.label
    return out


def aggregate(values: Iterable[float], how: str = "mean") -> float:
    """Mean or median of per-dataset scores."""
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise ValueError("nothing to aggregate")
    if how == "mean":
        return float(vals.mean())
    if how == "median":
        return float(np.median(vals))
    raise ValueError(f"unknown aggregation {how!r}")
