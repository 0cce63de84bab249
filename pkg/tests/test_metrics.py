from __future__ import annotations

import itertools

import numpy as np
import pytest

from oracles import ap_101, exhaustive_coco_match
from mixedquery.errors import DimMismatch, OverlapError
from mixedquery.metrics import (
    IOU_THRESHOLDS,
    Segment,
    aggregate,
    average_precision,
    cumulative_iou,
    foreground_mse,
    greedy_match,
    mask_ap,
    mean_iou,
    panoptic_quality,
)


def strip(shape, lo, hi):
    """Mask of a 1-row image with pixels [lo, hi) set."""
    m = np.zeros(shape, bool)
    m.reshape(-1)[lo:hi] = True
    return m


# --- panoptic quality ------------------------------------------------------------------


def test_pq_identical_is_one():
    gt = [Segment("sky", strip((1, 10), 0, 4)), Segment("dog", strip((1, 10), 4, 10))]
    pq, sq, rq, _ = panoptic_quality([gt], [gt])
    assert (pq, sq, rq) == (1.0, 1.0, 1.0)


def test_pq_single_match_iou_06():
    gt = [Segment("a", strip((1, 10), 0, 10))]
    pred = [Segment("a", strip((1, 10), 0, 6))]
    pq, _, _, _ = panoptic_quality([pred], [gt])
    assert pq == pytest.approx(0.6, abs=1e-9)


def test_pq_tp_fp_fn():
    shape = (1, 20)
    gt = [Segment("a", strip(shape, 0, 10)), Segment("a", strip(shape, 10, 20))]
    # IoU 0.8 with the first GT; IoU exactly 0.5 with the second, which is not a match
    pred = [Segment("a", strip(shape, 0, 8)), Segment("a", strip(shape, 15, 20))]
    pq, sq, rq, per = panoptic_quality([pred], [gt])
    assert pq == pytest.approx(0.4, abs=1e-9)
    assert (per["a"]["tp"], per["a"]["fp"], per["a"]["fn"]) == (1, 1, 1)


def test_pq_void_pixels():
    shape = (1, 10)
    gt = [Segment("a", strip(shape, 0, 4))]
    # pixels 4..9 are unlabeled: the extension into them does not hurt IoU
    pred = [Segment("a", strip(shape, 0, 8)), Segment("b", strip(shape, 8, 10))]
    pq, _, _, per = panoptic_quality([pred], [gt])
    assert pq == 1.0 and "b" not in per
    pq2, _, _, per2 = panoptic_quality([pred], [gt], unlabeled_is_void=False)
    # without void the IoU is 4/8, exactly at the threshold, so no match
    assert per2["a"]["pq"] == 0.0 and per2["b"]["fp"] == 1


def test_pq_rejects_overlap_and_size_mismatch():
    gt = [Segment("a", strip((1, 4), 0, 4))]
    with pytest.raises(OverlapError):
        panoptic_quality([[Segment("a", strip((1, 4), 0, 3)), Segment("b", strip((1, 4), 2, 4))]], [gt])
    with pytest.raises(DimMismatch):
        panoptic_quality([], [gt])


def _random_panoptic(rng, shape, labels):
    """Partition an image into labelled random segments."""
    ids = rng.integers(0, 5, size=shape)
    return [Segment(str(rng.choice(labels)), ids == k) for k in range(5) if (ids == k).any()]


def test_pq_decomposes_per_class_and_is_order_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gts = [_random_panoptic(rng, (6, 6), ["a", "b", "c"]) for _ in range(3)]
        preds = [_random_panoptic(rng, (6, 6), ["a", "b", "c"]) for _ in range(3)]
        pq, sq, rq, per = panoptic_quality(preds, gts)
        for c in per.values():
            assert abs(c["pq"] - c["sq"] * c["rq"]) < 1e-9
            assert 0 <= c["pq"] <= 1
        shuffled = [[p[i] for i in rng.permutation(len(p))] for p in preds]
        assert panoptic_quality(shuffled, gts)[0] == pytest.approx(pq, abs=1e-12)


# --- average precision -----------------------------------------------------------------------


def test_ap_examples():
    shape = (1, 20)
    gt = [Segment("a", strip(shape, 0, 20))]
    assert mask_ap([[Segment("a", strip(shape, 0, 20), 0.9)]], [gt])[0] == 1.0
    ap, per_t, _ = mask_ap([[Segment("a", strip(shape, 0, 11), 0.9)]], [gt])  # IoU 11/20 = 0.55
    assert ap == pytest.approx(0.2, abs=1e-9)
    assert [t for t, v in per_t.items() if v == 1.0] == [0.5, 0.55]
    gt2 = [Segment("a", strip(shape, 0, 10))]
    assert mask_ap([[Segment("a", strip(shape, 10, 20), 0.9)]], [gt2])[0] == 0.0


def test_ap_thresholds_and_undefined():
    assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    assert mask_ap([[]], [[]])[0] is None
    with pytest.raises(ValueError):
        average_precision([True], 0)


def test_average_precision_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(0, 12))
        flags = list(rng.random(n) < 0.5)
        num_gt = max(1, sum(flags) + int(rng.integers(0, 3)))
        assert average_precision(flags, num_gt) == pytest.approx(ap_101(flags, num_gt), abs=1e-12)


IOU_LEVELS = (0.0, 0.5, 0.55, 0.75, 1.0)


def test_greedy_equals_exhaustive_small_grid():
    # every IoU matrix up to 2x2 over the level grid, with tied and distinct scores
    for n_p, n_g in itertools.product(range(3), range(3)):
        for vals in itertools.product(IOU_LEVELS, repeat=n_p * n_g):
            ious = np.array(vals, dtype=float).reshape(n_p, n_g)
            for scores in ([0.9, 0.5][:n_p], [0.5, 0.9][:n_p], [0.5, 0.5][:n_p]):
                for t in (0.5, 0.55, 0.75):
                    assert greedy_match(scores, ious, t) == exhaustive_coco_match(scores, ious, t)


def test_greedy_equals_exhaustive_3x3():
    rng = np.random.default_rng(2)
    for _ in range(3000):
        n_p, n_g = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        ious = rng.choice(IOU_LEVELS, size=(n_p, n_g))
        scores = list(rng.choice([0.2, 0.5, 0.9], size=n_p))
        t = float(rng.choice(IOU_THRESHOLDS))
        assert greedy_match(scores, ious, t) == exhaustive_coco_match(scores, ious, t)


def _oracle_mask_ap(preds, gts):
    """Single image, single class AP from the enumeration oracle."""
    ious = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            u = np.logical_or(p.mask, g.mask).sum()
            ious[i, j] = np.logical_and(p.mask, g.mask).sum() / u if u else 0.0
    scores = [p.score for p in preds]
    order = sorted(range(len(preds)), key=lambda i: (-scores[i], i))
    total = 0.0
    for t in IOU_THRESHOLDS:
        match = exhaustive_coco_match(scores, ious, t)
        total += ap_101([match[i] >= 0 for i in order], len(gts))
    return total / len(IOU_THRESHOLDS)


def test_mask_ap_matches_oracle_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(150):
        gts = [Segment("a", rng.random((4, 4)) < 0.5) for _ in range(int(rng.integers(1, 4)))]
        preds = [Segment("a", rng.random((4, 4)) < 0.5, float(rng.choice([0.3, 0.6, 0.9]))) for _ in range(int(rng.integers(0, 4)))]
        assert mask_ap([preds], [gts])[0] == pytest.approx(_oracle_mask_ap(preds, gts), abs=1e-12)


def test_removing_false_positive_never_lowers_ap():
    rng = np.random.default_rng(4)
    shape = (1, 12)
    for _ in range(200):
        gts = [Segment("a", strip(shape, 0, 6))]
        preds = [Segment("a", rng.random(shape) < 0.5, float(rng.random())) for _ in range(3)]
        fp = Segment("a", strip(shape, 6, 12), float(rng.random()))  # disjoint from every GT
        with_fp = mask_ap([preds + [fp]], [gts])[0]
        assert mask_ap([preds], [gts])[0] >= with_fp - 1e-12


def test_ap_order_invariant_and_box_variant():
    rng = np.random.default_rng(5)
    gts = [Segment("a", strip((1, 12), 0, 6)), Segment("b", strip((1, 12), 6, 12))]
    preds = [Segment(str(rng.choice(["a", "b"])), rng.random((1, 12)) < 0.5, s) for s in (0.9, 0.7, 0.5, 0.3)]
    ap = mask_ap([preds], [gts])[0]
    assert mask_ap([preds[::-1]], [gts])[0] == ap
    assert mask_ap([gts], [gts], use_boxes=True)[0] == 1.0


# --- mIoU, referring, foreground -------------------------------------------------------------


def test_miou_examples():
    gt = np.array([[1, 2, 3]])
    assert mean_iou(gt, gt)[0] == 1.0
    # class 1 at IoU 1/2 (one GT pixel predicted as ignore), class 2 at IoU 1
    gt = np.array([[1, 1, 2, 2]])
    pred = np.array([[1, 255, 2, 2]])
    miou, per = mean_iou(pred, gt, ignore_label=255)
    assert miou == pytest.approx(0.75, abs=1e-9)
    assert per == {"1": 0.5, "2": 1.0}
    assert mean_iou(pred, np.full((1, 4), 255), ignore_label=255)[0] is None
    with pytest.raises(DimMismatch):
        mean_iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ignored_gt_pixels_do_not_count():
    gt = np.array([[1, 1, 0]])
    pred = np.array([[1, 1, 2]])
    assert mean_iou(pred, gt, ignore_label=0)[0] == 1.0


def test_cumulative_iou():
    a = strip((1, 4), 0, 2)
    b = strip((1, 4), 0, 4)
    # pair 1: inter 2 union 4; pair 2: inter 4 union 4 -> 6/8
    assert cumulative_iou([(a, b), (b, b)]) == pytest.approx(0.75)
    assert cumulative_iou([]) is None


def test_foreground_mse_examples():
    gt = np.ones((3, 3))
    assert foreground_mse(gt, gt) == 0
    assert foreground_mse(np.zeros((3, 3)), gt) == 1.0
    assert foreground_mse(np.full((3, 3), 0.5), gt) == pytest.approx(0.25, abs=1e-9)
    with pytest.raises(DimMismatch):
        foreground_mse(np.zeros((2, 2)), gt)


def test_aggregate():
    assert aggregate([1.0, 2.0, 6.0]) == 3.0
    assert aggregate([1.0, 2.0, 6.0], "median") == 2.0
    with pytest.raises(ValueError):
        aggregate([])
