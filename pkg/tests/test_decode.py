import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkyolo.decode import (
    BBox,
    BoxFormat,
    Detection,
    HeadDecoding,
    confidence_filter,
    convert_box,
    decode_head,
    iou,
    load_names,
    nms,
)
from darkyolo.estimator import bundled_path

from oracles import corner_iou, scalar_decode


def head_tensor(values_by_anchor, grid):
    """(B*(5+C), S, S) tensor with each anchor block constant over the grid."""
    blocks = [np.broadcast_to(np.asarray(v, np.float32)[:, None, None], (len(v), grid, grid))
              for v in values_by_anchor]
    return np.concatenate(blocks).copy()


def test_zero_offsets_center_of_first_cell():
    t = np.zeros((6, 1, 1), np.float32)
    d = decode_head(t, anchors=[(116, 90)], n_classes=1, stride=1.0)
    cx, cy, w, h = d.boxes[0]
    assert (cx, cy) == (0.5, 0.5)
    assert (w, h) == (116.0, 90.0)


def test_scalar_formula_cell_3_4():
    t = np.zeros((6, 5, 5), np.float32)
    t[0, 4, 3] = 0.5  # tx at row cy=4, column cx=3
    d = decode_head(t, anchors=[(10, 10)], n_classes=1, stride=32)
    row = 4 * 5 + 3
    expect = (1.0 / (1.0 + math.exp(-0.5)) + 3) * 32
    assert abs(d.boxes[row, 0] - expect) <= 1e-6
    assert abs(d.boxes[row, 1] - (0.5 + 4) * 32) <= 1e-6


def test_decode_matches_scalar_oracle_random():
    rng = np.random.default_rng(0)
    b, c, s, stride = 3, 4, 6, 16.0
    anchors = [(10.0, 13.0), (33.0, 23.0), (62.0, 45.0)]
    t = rng.normal(0, 2, (b * (5 + c), s, s)).astype(np.float32)
    d = decode_head(t, anchors=anchors, n_classes=c, stride=stride)
    assert d.dropped == 0
    row = 0
    for a in range(b):
        for cy in range(s):
            for cx in range(s):
                v = [float(t[a * (5 + c) + k, cy, cx]) for k in range(5 + c)]
                box, obj, scores = scalar_decode(*v[:5], v[5:], cx, cy, *anchors[a], stride)
                np.testing.assert_allclose(d.boxes[row], box, atol=1e-6, rtol=1e-12)
                assert abs(d.objectness[row] - obj) <= 1e-6
                np.testing.assert_allclose(d.class_scores[row], scores, atol=1e-6, rtol=0)
                row += 1


def test_non_finite_predictions_dropped():
    t = np.zeros((2 * 6, 2, 2), np.float32)
    t[0, 0, 0] = np.nan
    t[6 + 2, 1, 1] = 1e4  # exp overflows to inf
    d = decode_head(t, anchors=[(1, 1), (2, 2)], n_classes=1, stride=1)
    assert d.dropped == 2
    assert len(d) == 8 - 2
    assert np.isfinite(d.boxes).all()


def test_decode_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        decode_head(np.zeros((7, 2, 2)), anchors=[(1, 1)], n_classes=1, stride=1)


def candidates(scores):
    n = len(scores)
    return HeadDecoding(
        boxes=np.tile([10.0, 10.0, 4.0, 4.0], (n, 1)),
        objectness=np.ones(n),
        class_scores=np.asarray(scores, dtype=np.float64).reshape(n, -1),
    )


def test_confidence_filter_strictly_above():
    kept = confidence_filter(candidates([0.59, 0.61]), 0.6)
    assert [round(d.confidence, 2) for d in kept] == [0.61]
    assert len(confidence_filter(candidates([0.6]), 0.6)) == 0


def test_confidence_filter_extremes():
    c = candidates([0.0, 0.2, 0.9, 1.0])
    assert len(confidence_filter(c, 0.0)) == 3
    assert confidence_filter(c, 1.0) == []


def test_confidence_filter_argmax_class_and_names():
    c = candidates([[0.1, 0.8, 0.3]])
    (d,) = confidence_filter(c, 0.5, class_names=["a", "b", "c"], frame_id=4)
    assert (d.class_id, d.class_name, d.frame_id) == (1, "b", 4)
    assert d.box.coords == (8.0, 8.0, 12.0, 12.0)


def test_iou_examples():
    a = BBox.corners(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox.corners(5, 5, 6, 6)) == 0.0
    assert iou(a, BBox.corners(2, 0, 4, 2)) == 0.0  # touching edges
    assert abs(iou(a, BBox.corners(1, 1, 3, 3)) - 1 / 7) < 1e-12


def test_iou_degenerate_boxes():
    p = BBox.corners(1, 1, 1, 1)
    assert iou(p, p) == 1.0
    assert iou(p, BBox.corners(2, 2, 2, 2)) == 0.0
    assert iou(p, BBox.corners(0, 0, 2, 2)) == 0.0


def test_iou_accepts_other_formats():
    a = BBox(BoxFormat.TOPLEFT_PX, (0, 0, 2, 2))
    b = BBox(BoxFormat.CENTER_NORM, (0.2, 0.2, 0.2, 0.2))  # on a 10x10 image: (1,1)-(3,3)
    assert abs(iou(a, b, image_size=(10, 10)) - 1 / 7) < 1e-12


coord = st.floats(0, 100, allow_nan=False)


@st.composite
def corner_boxes(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return BBox.corners(x0, y0, x1, y1)


@settings(max_examples=300, deadline=None)
@given(corner_boxes(), corner_boxes())
def test_iou_symmetric_bounded_and_matches_oracle(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if (a.coords[2] - a.coords[0]) * (a.coords[3] - a.coords[1]) > 0:
        assert iou(a, a) == 1.0
        assert abs(v - corner_iou(a.coords, b.coords)) <= 1e-12


def det(box, score, cls=0):
    return Detection(BBox.corners(*box), cls, score)


def test_nms_hand_case():
    # 10x10 vs 10x9 sharing a corner region: IoU 90/100 = 0.9 > 0.6
    hi, lo = det((0, 0, 10, 10), 0.9), det((0, 0, 10, 9), 0.7)
    assert iou(hi.box, lo.box) == pytest.approx(0.9)
    assert nms([lo, hi], 0.6) == [hi]
    # IoU exactly 0.8
    a, b = det((0, 0, 10, 10), 0.9), det((0, 0, 10, 8), 0.7)
    assert iou(a.box, b.box) == pytest.approx(0.8)
    assert nms([a, b], 0.6) == [a]


def test_nms_cross_class_never_suppresses():
    a, b = det((0, 0, 10, 10), 0.9, 0), det((0, 0, 10, 9), 0.8, 1)
    assert nms([a, b], 0.6) == [a, b]


def test_nms_equal_to_threshold_survives():
    a, b = det((0, 0, 10, 10), 0.9), det((0, 0, 10, 6), 0.8)
    assert iou(a.box, b.box) == 0.6
    assert nms([a, b], 0.6) == [a, b]


def test_nms_tie_order_is_deterministic():
    a = det((5, 0, 6, 1), 0.5, 1)
    b = det((0, 0, 1, 1), 0.5, 1)
    c = det((0, 0, 1, 1), 0.5, 0)
    assert nms([a, b, c], 0.6) == [c, b, a]


@st.composite
def detection_sets(draw):
    n = draw(st.integers(0, 12))
    out = []
    for _ in range(n):
        x0, y0 = draw(st.integers(0, 20)), draw(st.integers(0, 20))
        w, h = draw(st.integers(1, 10)), draw(st.integers(1, 10))
        out.append(det((x0, y0, x0 + w, y0 + h), draw(st.floats(0.01, 1.0)), draw(st.integers(0, 2))))
    return out


@settings(max_examples=200, deadline=None)
@given(detection_sets(), st.floats(0.0, 1.0))
def test_nms_properties(dets, thr):
    kept = nms(dets, thr)
    assert len(kept) <= len(dets)
    assert nms(kept, thr) == kept
    assert all(k in dets for k in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= thr
    assert [d.confidence for d in kept] == sorted((d.confidence for d in kept), reverse=True)


def test_convert_examples():
    c = BBox(BoxFormat.CENTER_NORM, (0.5, 0.5, 0.5, 0.5))
    tl = convert_box(c, BoxFormat.TOPLEFT_PX, (256, 256))
    assert tl.coords == (64, 64, 128, 128)
    assert convert_box(tl, BoxFormat.CORNER_PX).coords == (64, 64, 192, 192)


def test_convert_compat_256_ignores_image_size():
    c = BBox(BoxFormat.CENTER_NORM, (0.5, 0.5, 0.5, 0.5))
    assert convert_box(c, BoxFormat.TOPLEFT_PX, (1920, 1080), compat_256=True).coords == (
        64, 64, 128, 128)
    assert convert_box(c, BoxFormat.TOPLEFT_PX, (1920, 1080)).coords == (480, 270, 960, 540)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
       st.integers(1, 2000), st.integers(1, 2000))
def test_convert_roundtrip(cx, cy, w, h, W, H):
    start = BBox(BoxFormat.CENTER_NORM, (cx, cy, w, h))
    corner = convert_box(start, BoxFormat.CORNER_PX, (W, H))
    tl = convert_box(corner, BoxFormat.TOPLEFT_PX, (W, H))
    back = convert_box(tl, "center_norm", (W, H))
    np.testing.assert_allclose(back.coords, start.coords, atol=1e-6)


def test_unknown_format_rejected():
    with pytest.raises(ValueError):
        convert_box(BBox.corners(0, 0, 1, 1), "polar")
    with pytest.raises(ValueError):
        BBox("xywh", (0, 0, 1, 1))


def test_invalid_corner_box_rejected():
    with pytest.raises(ValueError):
        BBox.corners(2, 0, 1, 1)


def test_bundled_names():
    names = load_names(bundled_path("coco.names"))
    assert len(names) == 80
    assert names[0] == "person"
