import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from groundzoom.errors import DegenerateBox
from groundzoom.geometry import BBox, PixelGrid, clamp_bbox, crop, giou, iou

from oracles import pixel_iou_giou


@st.composite
def boxes(draw, lo=-50.0, hi=50.0):
    xs = sorted(draw(st.lists(st.floats(lo, hi), min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(st.floats(lo, hi), min_size=2, max_size=2)))
    return BBox(xs[0], ys[0], xs[1], ys[1])


def test_clamp_examples():
    assert clamp_bbox(BBox(10, 20, 110, 220), 640, 480) == BBox(10, 20, 110, 220)
    assert clamp_bbox(BBox(110, 20, 10, 220), 640, 480) == BBox(10, 20, 110, 220)
    assert clamp_bbox(BBox(600, 400, 900, 700), 640, 480) == BBox(600, 400, 640, 480)


def test_clamp_degenerate_and_bad_dims():
    with pytest.raises(DegenerateBox):
        clamp_bbox(BBox(700, 10, 800, 20), 640, 480)
    with pytest.raises(DegenerateBox):
        clamp_bbox(BBox(5, 5, 5, 50), 640, 480)
    with pytest.raises(ValueError):
        clamp_bbox(BBox(0, 0, 1, 1), 0, 480)


@given(boxes(-1000, 1000), st.floats(1, 500), st.floats(1, 500))
def test_clamp_satisfies_invariants(b, w, h):
    try:
        c = clamp_bbox(b, w, h)
    except DegenerateBox:
        return
    assert 0 <= c.x1 <= c.x2 <= w
    assert 0 <= c.y1 <= c.y2 <= h
    assert c.area > 0


def _grid(h, w, c=3, seed=0):
    return PixelGrid(np.random.default_rng(seed).integers(0, 256, size=(h, w, c), dtype=np.uint8))


def test_crop_identity_and_unit():
    img = _grid(7, 9)
    assert crop(img, BBox(0, 0, 9, 7)) == img
    unit = crop(img, BBox(0, 0, 1, 1))
    assert (unit.width, unit.height) == (1, 1)
    assert np.array_equal(unit.pixel(0, 0), img.pixel(0, 0))


def test_crop_pixel_mapping_and_rounding():
    img = _grid(10, 12, seed=3)
    # round-half-up: 2.5 -> 3, 7.49 -> 7
    out = crop(img, BBox(2.5, 1.2, 7.49, 6.5))
    assert (out.width, out.height) == (7 - 3, 7 - 1)
    for i in range(out.width):
        for j in range(out.height):
            assert np.array_equal(out.pixel(i, j), img.pixel(3 + i, 1 + j))


def test_crop_zero_area():
    with pytest.raises(DegenerateBox):
        crop(_grid(4, 4), BBox(1.2, 0, 1.4, 3))


def test_nested_crop_composes():
    rng = np.random.default_rng(11)
    for trial in range(200):
        h, w = rng.integers(2, 7, size=2)
        img = _grid(int(h), int(w), c=1, seed=trial)
        ax1, ax2 = sorted(rng.choice(w + 1, 2, replace=False))
        ay1, ay2 = sorted(rng.choice(h + 1, 2, replace=False))
        a = BBox(ax1, ay1, ax2, ay2)
        bx1, bx2 = sorted(rng.choice(np.arange(ax1, ax2 + 1), 2, replace=False))
        by1, by2 = sorted(rng.choice(np.arange(ay1, ay2 + 1), 2, replace=False))
        b = BBox(bx1, by1, bx2, by2)
        assert crop(crop(img, a), b.translate(-a.x1, -a.y1)) == crop(img, b)


def test_iou_examples():
    b = BBox(3, 4, 10, 12)
    assert iou(b, b) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(2, 0, 3, 1)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_giou_examples():
    b = BBox(3, 4, 10, 12)
    assert giou(b, b) == 1.0
    assert giou(BBox(0, 0, 1, 1), BBox(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-15)
    outer, inner = BBox(0, 0, 10, 10), BBox(2, 2, 5, 7)
    assert giou(outer, inner) == iou(outer, inner)


def test_adjacent_cells_giou_zero():
    left, right = BBox(0, 0, 32, 32), BBox(32, 0, 64, 32)
    assert iou(left, right) == 0.0
    assert giou(left, right) == 0.0


def test_degenerate_boxes_stay_finite():
    p = BBox(1, 1, 1, 1)
    assert iou(p, p) == 0.0
    assert np.isfinite(giou(p, p))
    assert np.isfinite(giou(p, BBox(0, 0, 1, 3)))


@given(boxes(), boxes())
def test_symmetry_and_bounds(a, b):
    assert iou(a, b) == iou(b, a)
    assert giou(a, b) == giou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 <= giou(a, b) <= 1.0
    assert giou(a, b) <= iou(a, b) + 1e-12


@given(boxes(), boxes(), st.integers(-64, 64), st.integers(-64, 64))
def test_translation_invariance(a, b, dx, dy):
    # integer shifts keep the float arithmetic exact enough for a tight bound
    assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(iou(a, b), abs=1e-9)
    assert giou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(giou(a, b), abs=1e-9)


def test_pixel_counting_oracle_exhaustive_sample():
    coords = [(x1, x2) for x1, x2 in itertools.combinations(range(13), 2)]
    rng = np.random.default_rng(0)
    for _ in range(3000):
        (ax1, ax2), (ay1, ay2), (bx1, bx2), (by1, by2) = (coords[i] for i in rng.integers(len(coords), size=4))
        a, b = BBox(ax1, ay1, ax2, ay2), BBox(bx1, by1, bx2, by2)
        want_iou, want_giou = pixel_iou_giou(a.as_list(), b.as_list())
        assert abs(iou(a, b) - want_iou) <= 1e-12
        assert abs(giou(a, b) - want_giou) <= 1e-12
