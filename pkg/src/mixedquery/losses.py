"""Training objective: focal class loss, L1 + GIoU box loss, dice mask loss.

All terms return analytic gradients with respect to the decoder outputs.
Conventions:

* class logits are dot products between per-query class embeddings and
  rows of a text bank; a (query, text) pair is positive iff the query is
  matched to a ground truth carrying that text.
* boxes are normalized ``(cx, cy, w, h)``; GIoU is computed in corner form.
* mask probabilities are ``sigmoid(mask_embed . pixel_feature)`` on the
  pixel-feature grid; ground truths are majority-downsampled to that grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateBox, DimMismatch
from .maskops import cxcywh_to_xyxy, downsample_majority
from .semantics import embed_bank


@dataclass(frozen=True)
class LossWeights:
    cls: float = 4.0
    l1: float = 5.0
    giou: float = 2.0
    dice: float = 5.0
    alpha: float = 0.25
    gamma: float = 2.0
    eps: float = 1.0

    def __post_init__(self):
        vals = (self.cls, self.l1, self.giou, self.dice, self.alpha, self.gamma, self.eps)
        if not all(np.isfinite(vals)):
            raise ValueError("loss weights must be finite")
        if min(self.cls, self.l1, self.giou, self.dice) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.alpha < 1 or self.gamma < 0 or self.eps <= 0:
            raise ValueError("need 0 < alpha < 1, gamma >= 0, eps > 0")


# matcher weights share the loss defaults
CostWeights = LossWeights


@dataclass
class DecoderOutputs:
    """Per-query predictions.

    ``pixel_features`` (``d_mask x H' x W'``) is carried alongside the query
    outputs because mask predictions need both.
    """

    class_embeds: np.ndarray  # Q x d_text
    boxes: np.ndarray  # Q x 4, normalized cx, cy, w, h
    mask_embeds: np.ndarray  # Q x d_mask
    pixel_features: np.ndarray  # d_mask x H' x W'

    @property
    def num_queries(self) -> int:
        return self.class_embeds.shape[0]

    def mask_logits(self) -> np.ndarray:
        """Q x (H'*W') mask logits."""
        d = self.pixel_features.shape[0]
        return self.mask_embeds @ self.pixel_features.reshape(d, -1)


@dataclass
class Targets:
    """Ground truth of one image, prepared for the loss at grid resolution."""

    text_bank: np.ndarray  # T x d_text
    labels: tuple[str, ...]  # T bank texts
    text_index: np.ndarray  # G, row of text_bank for each GT
    boxes: np.ndarray  # G x 4 normalized cxcywh
    masks: np.ndarray  # G x P, 0/1 at grid resolution
    valid: np.ndarray  # P, 1 where the pixel takes part in the mask loss
    thing_stuff: tuple[str, ...] = ()

    @property
    def num_gt(self) -> int:
        return len(self.text_index)


def prepare_targets(ann, grid: tuple[int, int], vocabulary: Sequence[str] = (), text_dim: int = 64) -> Targets:
    """Downsample masks, normalize boxes and build the text bank for ``ann``.

    The bank is ``vocabulary`` followed by any record text not already in it,
    so unmatched vocabulary entries act as negatives.
    """
    gh, gw = grid
    labels = list(vocabulary)
    seen = set(labels)
    index = []
    for r in ann.records:
        if r.label_text not in seen:
            seen.add(r.label_text)
            labels.append(r.label_text)
        index.append(labels.index(r.label_text))
    h, w = ann.image_size
    boxes = np.array([r.bbox.to_cxcywh(h, w) for r in ann.records]).reshape(-1, 4)
    masks = np.array([downsample_majority(r.binary(), gh, gw).ravel() for r in ann.records], dtype=float)
    masks = masks.reshape(len(ann.records), gh * gw)
    valid = (~downsample_majority(ann.ignore_mask(), gh, gw)).ravel().astype(float)
    if ann.ignore is None:
        valid[:] = 1.0
    bank = embed_bank(labels, text_dim) if labels else np.zeros((0, text_dim))
    return Targets(
        bank,
        tuple(labels),
        np.array(index, dtype=int),
        boxes,
        masks,
        valid,
        tuple(r.thing_stuff for r in ann.records),
    )


# --- elementwise helpers ------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_positive(z, alpha: float, gamma: float):
    """Loss ``-alpha (1-p)^gamma log p`` and its derivative w.r.t. the logit."""
    p = sigmoid(z)
    log_p = -_softplus(-z)
    q = 1.0 - p
    loss = -alpha * q**gamma * log_p
    grad = alpha * gamma * q**gamma * p * log_p - alpha * q ** (gamma + 1)
    return loss, grad


def focal_negative(z, alpha: float, gamma: float):
    """Loss ``-(1-alpha) p^gamma log(1-p)`` and its derivative w.r.t. the logit."""
    p = sigmoid(z)
    log_q = -_softplus(z)
    q = 1.0 - p
    loss = -(1 - alpha) * p**gamma * log_q
    grad = -(1 - alpha) * gamma * p**gamma * q * log_q + (1 - alpha) * p ** (gamma + 1)
    return loss, grad


def dice_from_probs(p, g, eps: float = 1.0, valid=None) -> float:
    p = np.asarray(p, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    v = np.ones_like(p) if valid is None else np.asarray(valid, dtype=float).ravel()
    num = 2.0 * np.sum(p * g * v) + eps
    den = np.sum(p * v) + np.sum(g * v) + eps
    return float(1.0 - num / den)


def giou_with_grad(pred_xyxy: np.ndarray, gt_xyxy: np.ndarray):
    """GIoU of one predicted box against one ground-truth box, plus d GIoU / d pred."""
    px0, py0, px1, py1 = pred_xyxy
    gx0, gy0, gx1, gy1 = gt_xyxy
    ix0, ix1 = max(px0, gx0), min(px1, gx1)
    iy0, iy1 = max(py0, gy0), min(py1, gy1)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    pw, ph = px1 - px0, py1 - py0
    area_p = pw * ph
    union = area_p + (gx1 - gx0) * (gy1 - gy0) - inter
    cw = max(px1, gx1) - min(px0, gx0)
    ch = max(py1, gy1) - min(py0, gy0)
    enclose = cw * ch
    giou = inter / union - (enclose - union) / enclose

    d_iw = np.zeros(4)
    d_ih = np.zeros(4)
    if iw > 0 and ih > 0:
        d_iw[0] = -1.0 if px0 > gx0 else 0.0
        d_iw[2] = 1.0 if px1 < gx1 else 0.0
        d_ih[1] = -1.0 if py0 > gy0 else 0.0
        d_ih[3] = 1.0 if py1 < gy1 else 0.0
    d_inter = ih * d_iw + iw * d_ih
    d_area = np.array([-ph, -pw, ph, pw])
    d_union = d_area - d_inter
    d_cw = np.array([-1.0 if px0 < gx0 else 0.0, 0.0, 1.0 if px1 > gx1 else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if py0 < gy0 else 0.0, 0.0, 1.0 if py1 > gy1 else 0.0])
    d_enclose = ch * d_cw + cw * d_ch
    grad = d_inter / union - inter * d_union / union**2 + d_union / enclose - union * d_enclose / enclose**2
    return giou, grad


def _xyxy_grad_to_cxcywh(g: np.ndarray) -> np.ndarray:
    gx0, gy0, gx1, gy1 = g
    return np.array([gx0 + gx1, gy0 + gy1, (gx1 - gx0) / 2.0, (gy1 - gy0) / 2.0])


def pairwise_giou(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """GIoU matrix between every row of ``a`` and every row of ``b``."""
    a = a_xyxy[:, None, :]
    b = b_xyxy[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    return inter / union - (enclose - union) / enclose


def _pairs(assignment) -> list[tuple[int, int]]:
    """``(gt, query)`` pairs from an Assignment or a plain sequence."""
    if hasattr(assignment, "pairs"):
        return list(assignment.pairs)
    return [(int(g), int(q)) for g, q in assignment]


# --- loss terms ---------------------------------------------------------------


def focal_class_loss(class_embeds, text_bank, assignment, text_index=None, num_gt=None, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss over every (query, text) pair.

    ``text_index[g]`` is the bank row of ground truth ``g`` (identity when
    omitted). The sum is divided by the number of ground truths (at least 1).
    Returns ``(loss, grad_class_embeds, grad_text_bank)``.
    """
    class_embeds = np.asarray(class_embeds, dtype=float)
    text_bank = np.asarray(text_bank, dtype=float)
    if class_embeds.shape[1] != text_bank.shape[1]:
        raise DimMismatch(f"class embeds have dim {class_embeds.shape[1]}, text bank {text_bank.shape[1]}")
    pairs = _pairs(assignment)
    if text_index is None:
        text_index = np.arange(text_bank.shape[0])
    if num_gt is None:
        num_gt = len(text_index)
    logits = class_embeds @ text_bank.T
    positive = np.zeros(logits.shape, dtype=bool)
    for g, q in pairs:
        positive[q, text_index[g]] = True
    pos_loss, pos_grad = focal_positive(logits, alpha, gamma)
    neg_loss, neg_grad = focal_negative(logits, alpha, gamma)
    norm = max(num_gt, 1)
    loss = np.where(positive, pos_loss, neg_loss).sum() / norm
    d_logits = np.where(positive, pos_grad, neg_grad) / norm
    return float(loss), d_logits @ text_bank, d_logits.T @ class_embeds


def box_loss(boxes, gt_boxes, assignment, l1_weight=5.0, giou_weight=2.0):
    """Mean over matched pairs of ``l1_weight * L1 + giou_weight * (1 - GIoU)``.

    Returns ``(loss, grad_boxes, mean_l1, mean_giou_term)``.
    """
    boxes = np.asarray(boxes, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float)
    pairs = _pairs(assignment)
    grad = np.zeros_like(boxes)
    if not pairs:
        return 0.0, grad, 0.0, 0.0
    l1_sum = 0.0
    giou_sum = 0.0
    n = len(pairs)
    for g, q in pairs:
        b = boxes[q]
        if b[2] <= 0 or b[3] <= 0:
            raise DegenerateBox(f"query {q} predicts non-positive size {b[2:]}")
        diff = b - gt_boxes[g]
        l1_sum += np.abs(diff).sum()
        giou, d_giou = giou_with_grad(cxcywh_to_xyxy(b), cxcywh_to_xyxy(gt_boxes[g]))
        giou_sum += 1.0 - giou
        grad[q] += (l1_weight * np.sign(diff) - giou_weight * _xyxy_grad_to_cxcywh(d_giou)) / n
    l1 = l1_sum / n
    giou_term = giou_sum / n
    return l1_weight * l1 + giou_weight * giou_term, grad, l1, giou_term


def dice_mask_loss(mask_embeds, pixel_features, gt_masks, assignment, eps=1.0, valid=None):
    """Mean dice loss over matched pairs.

    ``pixel_features`` is ``d_mask x H' x W'`` (or already flattened to
    ``d_mask x P``); ``gt_masks`` is ``G x P`` at the same resolution.
    Returns ``(loss, grad_mask_embeds, grad_pixel_features)``.
    """
    mask_embeds = np.asarray(mask_embeds, dtype=float)
    pf = np.asarray(pixel_features, dtype=float)
    shape = pf.shape
    pf = pf.reshape(shape[0], -1)
    if mask_embeds.shape[1] != pf.shape[0]:
        raise DimMismatch(f"mask embeds have dim {mask_embeds.shape[1]}, pixel features {pf.shape[0]}")
    gt_masks = np.asarray(gt_masks, dtype=float).reshape(-1, pf.shape[1]) if len(gt_masks) else np.zeros((0, pf.shape[1]))
    v = np.ones(pf.shape[1]) if valid is None else np.asarray(valid, dtype=float).ravel()
    pairs = _pairs(assignment)
    g_me = np.zeros_like(mask_embeds)
    g_pf = np.zeros_like(pf)
    if not pairs:
        return 0.0, g_me, g_pf.reshape(shape)
    gs = np.array([g for g, _ in pairs])
    qs = np.array([q for _, q in pairs])
    logits = mask_embeds[qs] @ pf  # M x P
    p = sigmoid(logits)
    tgt = gt_masks[gs]
    num = 2.0 * (p * tgt * v).sum(axis=1) + eps
    den = (p * v).sum(axis=1) + (tgt * v).sum(axis=1) + eps
    n = len(pairs)
    loss = float(np.mean(1.0 - num / den))
    d_p = -v * (2.0 * tgt * den[:, None] - num[:, None]) / den[:, None] ** 2 / n
    d_logit = d_p * p * (1.0 - p)
    np.add.at(g_me, qs, d_logit @ pf.T)
    g_pf += mask_embeds[qs].T @ d_logit
    return loss, g_me, g_pf.reshape(shape)


@dataclass
class LossBreakdown:
    class_loss: float
    l1_loss: float
    giou_loss: float
    mask_loss: float
    total: float
    grad_class_embeds: np.ndarray
    grad_boxes: np.ndarray
    grad_mask_embeds: np.ndarray
    grad_pixel_features: np.ndarray
    assignment: object = None

    @property
    def box_loss(self) -> float:
        """Unweighted sum of the L1 and GIoU terms."""
        return self.l1_loss + self.giou_loss


def loss_for_assignment(outputs: DecoderOutputs, targets: Targets, assignment, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Total loss and gradients for a fixed matching."""
    cls, g_cls, _ = focal_class_loss(
        outputs.class_embeds, targets.text_bank, assignment, targets.text_index, targets.num_gt, weights.alpha, weights.gamma
    )
    _, g_box, l1, giou = box_loss(outputs.boxes, targets.boxes, assignment, weights.l1, weights.giou)
    dice, g_me, g_pf = dice_mask_loss(
        outputs.mask_embeds, outputs.pixel_features, targets.masks, assignment, weights.eps, targets.valid
    )
    total = weights.cls * cls + weights.l1 * l1 + weights.giou * giou + weights.dice * dice
    return LossBreakdown(
        cls,
        l1,
        giou,
        dice,
        total,
        weights.cls * g_cls,
        g_box,
        weights.dice * g_me,
        weights.dice * g_pf,
        assignment,
    )


def total_loss(outputs: DecoderOutputs, targets: Targets, weights: LossWeights = LossWeights(), strategy="mixed", provenance=None) -> LossBreakdown:
    """Match with ``strategy`` and evaluate every loss term on the result.

    Unmatched queries only contribute negative class terms.
    """
    from .matching import Provenance, match_with_strategy

    if provenance is None:
        provenance = Provenance.all_learnable(outputs.num_queries)
    assignment = match_with_strategy(targets, outputs, strategy, provenance, weights)
    return loss_for_assignment(outputs, targets, assignment, weights)


# --- finite-difference checking -------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: list[int] = field(default_factory=list)
    worst_index: int = -1

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    f: Callable[[np.ndarray], float],
    point,
    analytic,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    indices=None,
    kink_tol: float = 1e-2,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``f`` at ``point``.

    Relative error is ``|a - n| / max(1, |a|, |n|)``. Coordinates where the
    one-sided slopes disagree by more than ``kink_tol`` sit on a kink (e.g.
    an L1 term at zero residual); they are reported in ``skipped`` instead of
    failing the check.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=float)
    a = np.asarray(analytic, dtype=float).ravel()
    flat = x.ravel()
    f0 = f(x)
    idx = range(flat.size) if indices is None else indices
    worst, worst_i, skipped, n = 0.0, -1, [], 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(int(i))
            continue
        num = (fp - fm) / (2 * step)
        err = abs(a[i] - num) / max(1.0, abs(a[i]), abs(num))
        n += 1
        if err > worst:
            worst, worst_i = err, int(i)
    return GradCheckReport(worst, n, skipped, worst_i)
