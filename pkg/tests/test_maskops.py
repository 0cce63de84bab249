from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixedquery.errors import DimMismatch, EmptyMask, SizeMismatch
from mixedquery.maskops import (
    BBox,
    Rle,
    bbox_giou,
    bbox_iou,
    cxcywh_to_xyxy,
    downsample_majority,
    mask_iou,
    mask_to_bbox,
    rle_decode,
    rle_encode,
    upsample_nearest,
)


def colmajor(bits, h, w):
    return np.array(bits, dtype=bool).reshape((w, h)).T


masks = st.tuples(st.integers(1, 64), st.integers(1, 64)).flatmap(
    lambda hw: arrays(np.bool_, hw, elements=st.booleans())
)


def test_rle_encode_examples():
    assert rle_encode(np.zeros((2, 2), bool)).counts == (4,)
    assert rle_encode(np.ones((2, 2), bool)).counts == (0, 4)
    assert rle_encode(colmajor([0, 1, 1, 0], 2, 2)).counts == (1, 2, 1)


def test_rle_decode_examples():
    assert not rle_decode(Rle(2, 2, (4,))).any()
    np.testing.assert_array_equal(rle_decode(Rle(2, 2, (1, 2, 1))), colmajor([0, 1, 1, 0], 2, 2))
    with pytest.raises(SizeMismatch):
        rle_decode(Rle(2, 2, (3,)))


def test_rle_is_column_major():
    m = np.array([[1, 0, 0], [1, 0, 0]], dtype=bool)  # first column set
    assert rle_encode(m).counts == (0, 2, 4)


@settings(max_examples=200, deadline=None)
@given(masks)
def test_rle_round_trip(m):
    rle = rle_encode(m)
    assert sum(rle.counts) == m.size
    assert all(c > 0 for c in rle.counts[1:])
    np.testing.assert_array_equal(rle_decode(rle), m)


def test_rle_json_round_trip():
    rle = Rle(3, 2, (1, 2, 3))
    assert Rle.from_json(rle.to_json()) == rle
    assert rle.to_json() == {"h": 3, "w": 2, "counts": [1, 2, 3]}


def test_mask_to_bbox_examples():
    m = np.zeros((8, 8), bool)
    m[3, 5] = True
    assert mask_to_bbox(m) == BBox(5, 3, 6, 4)
    m = np.zeros((4, 4), bool)
    m[0, 0] = m[2, 1] = True
    assert mask_to_bbox(m) == BBox(0, 0, 2, 3)
    with pytest.raises(EmptyMask):
        mask_to_bbox(np.zeros((3, 3), bool))


@settings(max_examples=100, deadline=None)
@given(masks)
def test_mask_to_bbox_is_tight(m):
    if not m.any():
        return
    b = mask_to_bbox(m)
    rows, cols = np.nonzero(m)
    assert b.x_min <= cols.min() and cols.max() < b.x_max
    assert b.y_min <= rows.min() and rows.max() < b.y_max
    # every edge touches a set pixel, so no smaller box contains them all
    assert m[:, b.x_min].any() and m[:, b.x_max - 1].any()
    assert m[b.y_min, :].any() and m[b.y_max - 1, :].any()


def test_mask_iou_examples():
    a = np.zeros((2, 2), bool)
    a[0] = True
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(a, np.ones((2, 2), bool)) == 0.5
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 0.0
    with pytest.raises(DimMismatch):
        mask_iou(a, np.ones((3, 2), bool))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_mask_iou_properties(data):
    shape = data.draw(st.tuples(st.integers(1, 12), st.integers(1, 12)))
    a = data.draw(arrays(np.bool_, shape))
    b = data.draw(arrays(np.bool_, shape))
    v = mask_iou(a, b)
    assert v == mask_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (bool(a.any()) and np.array_equal(a, b))


def test_box_examples():
    assert bbox_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert bbox_iou((0, 0, 1, 1), (2, 0, 3, 1)) == 0.0
    assert bbox_iou(BBox(0, 0, 2, 2), BBox(0, 0, 1, 1)) == 0.25
    assert bbox_giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert bbox_giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)
    assert bbox_giou((0, 0, 2, 2), (0, 0, 1, 1)) == 0.25


boxes = st.tuples(
    st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 10), st.floats(0.1, 10)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_bounded_by_iou(a, b):
    iou, giou = bbox_iou(a, b), bbox_giou(a, b)
    assert -1.0 - 1e-12 <= giou <= iou + 1e-12 <= 1.0 + 2e-12


def test_bbox_rejects_empty_area():
    with pytest.raises(Exception):
        BBox(1, 1, 1, 3)


def test_bbox_normalized_center_form():
    np.testing.assert_allclose(BBox(0, 0, 4, 2).to_cxcywh(4, 8), [0.25, 0.25, 0.5, 0.5])
    np.testing.assert_allclose(cxcywh_to_xyxy(np.array([0.5, 0.5, 0.2, 0.4])), [0.4, 0.3, 0.6, 0.7])


def test_downsample_majority_and_upsample():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    m[2, 2] = True  # one of four pixels in its cell: below half
    d = downsample_majority(m, 2, 2)
    np.testing.assert_array_equal(d, [[True, False], [False, False]])
    m[3, 3] = True  # now half
    assert downsample_majority(m, 2, 2)[1, 1]
    up = upsample_nearest(np.array([[1, 2], [3, 4]]), 4, 4)
    np.testing.assert_array_equal(up[:, 0], [1, 1, 3, 3])
