import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tabparse.errors import GeometryError
from tabparse.geometry import (Box, QuadBox, ScoredBox, box_delta, box_delta_tensor, iou, iou_matrix, nms,
                               resample_polyline, spatial_compat_feature, spatial_compat_tensor)

INT_BOXES = st.builds(Box, st.integers(0, 60), st.integers(0, 60), st.integers(1, 40), st.integers(1, 40))
BOXES = st.builds(
    Box,
    st.floats(0, 100, allow_nan=False),
    st.floats(0, 100, allow_nan=False),
    st.floats(1, 60, allow_nan=False),
    st.floats(1, 60, allow_nan=False),
)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, Box(0, 0, 10, 10)) == 1.0
    assert iou(a, Box(20, 20, 10, 10)) == 0.0
    assert iou(a, Box(5, 0, 10, 10)) == pytest.approx(1 / 3)
    # touching edges do not overlap
    assert iou(a, Box(10, 0, 10, 10)) == 0.0


@given(a=BOXES, b=BOXES)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


@given(a=st.lists(BOXES, min_size=1, max_size=5), b=st.lists(BOXES, min_size=1, max_size=5))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix([x.to_xyxy() for x in a], [y.to_xyxy() for y in b])
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(iou(x, y), abs=1e-9)


def _nms_oracle(boxes, threshold):
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        if all(iou(boxes[i].box, boxes[k].box) <= threshold for k in kept):
            kept.append(i)
    return kept


def test_nms_examples():
    assert nms([ScoredBox(Box(0, 0, 10, 10), 0.5)], 0.5) == [0]
    same = [ScoredBox(Box(0, 0, 10, 10), 0.8), ScoredBox(Box(0, 0, 10, 10), 0.9)]
    assert nms(same, 0.7) == [1]
    assert nms([], 0.5) == []


def test_nms_ties_keep_lower_index():
    same = [ScoredBox(Box(0, 0, 10, 10), 0.9), ScoredBox(Box(0, 0, 10, 10), 0.9)]
    assert nms(same, 0.5) == [0]


@settings(max_examples=1000, deadline=None)
@given(boxes=st.lists(st.builds(ScoredBox, INT_BOXES, st.floats(0, 1)), min_size=1, max_size=8),
       threshold=st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
def test_nms_matches_pairwise_oracle(boxes, threshold):
    kept = nms(boxes, threshold)
    assert kept == _nms_oracle(boxes, threshold)
    for x in kept:
        for y in kept:
            if x != y:
                assert iou(boxes[x].box, boxes[y].box) <= threshold + 1e-12


def test_nms_rejects_bad_threshold():
    with pytest.raises(GeometryError):
        nms([ScoredBox(Box(0, 0, 1, 1), 0.5)], 1.0)


def test_box_delta_examples():
    assert box_delta(Box(3, 4, 5, 6), Box(3, 4, 5, 6)) == (0, 0, 0, 0, 0, 0)
    got = box_delta(Box(0, 0, 10, 10), Box(5, 5, 20, 20))
    assert got == pytest.approx((-0.5, -0.5, math.log(0.5), math.log(0.5), 0.25, 0.25))


def test_spatial_compat_example():
    got = spatial_compat_feature(Box(0, 0, 10, 10), Box(10, 0, 10, 10))
    want = [-1, 0, 0, 0, 1, 0,
            0, 0, math.log(0.5), 0, 0, 0,
            1, 0, math.log(0.5), 0, -0.5, 0]
    assert got == pytest.approx(want)
    assert spatial_compat_feature(Box(1, 2, 3, 4), Box(1, 2, 3, 4)) == pytest.approx([0.0] * 18)


@given(a=BOXES, b=BOXES)
def test_box_delta_formula(a, b):
    d = box_delta(a, b)
    want = ((a.x - b.x) / a.w, (a.y - b.y) / a.h, math.log(a.w / b.w), math.log(a.h / b.h),
            (b.x - a.x) / b.w, (b.y - a.y) / b.h)
    assert d == pytest.approx(want)
    swapped = box_delta(b, a)
    assert swapped[2] == pytest.approx(-d[2])
    assert swapped[3] == pytest.approx(-d[3])


@given(a=BOXES, b=BOXES)
def test_union_is_tightest_container(a, b):
    u = a.union(b)
    assert u.x <= min(a.x, b.x) + 1e-9 and u.y <= min(a.y, b.y) + 1e-9
    assert u.x2 >= max(a.x2, b.x2) - 1e-9 and u.y2 >= max(a.y2, b.y2) - 1e-9
    assert u.area == pytest.approx((max(a.x2, b.x2) - min(a.x, b.x)) * (max(a.y2, b.y2) - min(a.y, b.y)))


@given(a=BOXES, b=BOXES)
def test_tensor_forms_match_scalar(a, b):
    ta = torch.tensor([a.x, a.y, a.w, a.h], dtype=torch.float64)
    tb = torch.tensor([b.x, b.y, b.w, b.h], dtype=torch.float64)
    assert box_delta_tensor(ta, tb).tolist() == pytest.approx(list(box_delta(a, b)))
    assert spatial_compat_tensor(ta, tb).tolist() == pytest.approx(spatial_compat_feature(a, b))


def test_value_type_invariants():
    with pytest.raises(GeometryError):
        Box(0, 0, 0, 5)
    with pytest.raises(GeometryError):
        ScoredBox(Box(0, 0, 1, 1), 1.5)
    with pytest.raises(GeometryError):
        QuadBox(((0, 0), (0, 10), (10, 10), (10, 0)))        # counter-clockwise on screen
    with pytest.raises(GeometryError):
        QuadBox(((0, 0), (10, 10), (10, 0), (0, 10)))        # bow tie
    quad = QuadBox.from_box(Box(1, 2, 3, 4))
    assert quad.hull() == Box(1, 2, 3, 4)
    assert quad.area == pytest.approx(12.0)
    assert QuadBox.from_flat(quad.flat()) == quad


def test_resample_polyline_keeps_end_points():
    out = resample_polyline([(0, 0), (10, 0), (10, 7)], step=4.0)
    assert tuple(out[0]) == (0, 0)
    assert tuple(out[-1]) == pytest.approx((10, 7))
    gaps = np.hypot(*np.diff(out, axis=0).T)
    assert gaps.max() <= 4.0 + 1e-9
