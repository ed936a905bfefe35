import numpy as np
import pytest
from hypothesis import given, strategies as st

from denet.evaluate import coverage
from denet.model import CornerMap
from denet.sampler import (
    BBox,
    RoI,
    RoISource,
    augment_rois_training,
    extract_feature,
    generate_rois,
    lattice_indices,
    score_box,
    search_boxes,
)

from oracles import brute_force_rois


def random_map(rng, h, w):
    return rng.uniform(0, 1, (4, h, w))


def test_score_examples():
    assert score_box(np.ones((4, 3, 3)), BBox(0, 0, 2, 2)) == 1.0
    assert score_box(np.full((4, 3, 3), 0.5), BBox(0, 0, 2, 2)) == 0.0625
    p = np.zeros((4, 6, 6))
    p[0, 1, 1], p[1, 1, 4], p[2, 3, 1], p[3, 3, 4] = 0.9, 0.5, 0.5, 0.8
    assert score_box(CornerMap(p), BBox(1, 1, 4, 3)) == pytest.approx(0.18, abs=1e-15)
    assert score_box(p, BBox(1, 1, 4, 3)) == 0.9 * 0.5 * 0.5 * 0.8


def test_score_rejects_fractional_cells():
    with pytest.raises(ValueError):
        score_box(np.ones((4, 3, 3)), BBox(0.5, 0, 2, 2))


def test_single_pair_trace():
    p = np.full((4, 8, 8), 0.01)
    p[0, 1, 1] = 0.9  # top-left at (x=1, y=1)
    p[3, 4, 5] = 0.8  # bottom-right at (x=5, y=4)
    p[1, 1, 5] = 0.5
    p[2, 4, 1] = 0.5
    rois = generate_rois(p, 0.05, 64, 8)
    # the TR/BL pair (0.5, 0.5) also forms the same box; dedup keeps one
    assert [r.box.as_tuple() for r in rois] == [(1.0, 1.0, 5.0, 4.0)]
    assert rois[0].score == pytest.approx(0.18)


def test_all_below_lambda_gives_nothing():
    assert generate_rois(np.full((4, 6, 6), 0.04), 0.05, 36, 8) == []


@pytest.mark.parametrize("lam", [0.0, 0.1])
@pytest.mark.parametrize("n", [2, 4, 8])
def test_matches_brute_force(lam, n):
    rng = np.random.default_rng(int(lam * 10) * 100 + n)
    for _ in range(25):
        h, w = rng.integers(4, 13, size=2)
        p = random_map(rng, h, w)
        boxes, scores = search_boxes(p, lam, h * w, n)
        expect = brute_force_rois(p, lam, n)
        assert [tuple(int(v) for v in b) for b in boxes] == [b for b, _ in expect]
        assert list(scores) == [s for _, s in expect]


@given(st.integers(0, 2**32 - 1))
def test_roi_scores_self_consistent(seed):
    rng = np.random.default_rng(seed)
    p = random_map(rng, *rng.integers(2, 10, size=2))
    rois = generate_rois(p, 0.1, 16, 6)
    boxes = [r.box.as_tuple() for r in rois]
    assert len(set(boxes)) == len(boxes)
    scores = [r.score for r in rois]
    assert scores == sorted(scores, reverse=True)
    for r in rois:
        assert abs(r.score - score_box(p, r.box)) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(0, 0.5), st.floats(0, 0.5))
def test_raising_lambda_only_removes(seed, a, b):
    lo, hi = sorted((a, b))
    rng = np.random.default_rng(seed)
    p = random_map(rng, 6, 6)
    everything = 36 * 36
    low = {tuple(x) for x in search_boxes(p, lo, 36, 36)[0].tolist()}
    high = {tuple(x) for x in search_boxes(p, hi, 36, 36)[0].tolist()}
    assert len(low) <= everything
    assert high <= low


@given(st.integers(0, 2**32 - 1))
def test_coverage_monotone_in_n(seed):
    rng = np.random.default_rng(seed)
    p = random_map(rng, 8, 8)
    gt = []
    for _ in range(3):
        x1, x2 = sorted(rng.choice(8, 2, replace=False))
        y1, y2 = sorted(rng.choice(8, 2, replace=False))
        gt.append(BBox(float(x1), float(y1), float(x2), float(y2)))
    prev = -1.0
    for n in (1, 2, 4, 8, 16):
        c = coverage(generate_rois(p, 0.0, 64, n), gt, 0.5)
        assert c >= prev
        prev = c


def test_constant_map_feature():
    fmap = np.full((3, 10, 10), 0.75, dtype=np.float32)
    v = extract_feature(fmap, BBox(1, 2, 7, 8), 3)
    assert v.shape == (49 * 3 + 2,)
    assert np.all(v[:-2] == 0.75)
    np.testing.assert_allclose(v[-2:], [0.6, 0.6])


def test_narrow_box_samples_single_column():
    ys, xs, _ = lattice_indices(np.array([[4.0, 1.0, 4.4, 9.0]]), (12, 12))
    assert np.unique(xs).tolist() == [4]
    assert len(np.unique(ys)) == 7


def test_lattice_layout_is_point_major():
    fmap = np.arange(2 * 5 * 5, dtype=np.float64).reshape(2, 5, 5)
    v = extract_feature(fmap, BBox(0, 0, 4, 4))
    # first lattice point is cell (0, 0): both channels, then the next point
    assert v[:2].tolist() == [fmap[0, 0, 0], fmap[1, 0, 0]]
    ys, xs, _ = lattice_indices(np.array([[0.0, 0.0, 4.0, 4.0]]), (5, 5))
    assert v[2:4].tolist() == [fmap[0, ys[0, 1], xs[0, 1]], fmap[1, ys[0, 1], xs[0, 1]]]


def test_augment_counts():
    rng = np.random.default_rng(0)
    gt = [BBox(1, 1, 4, 4), BBox(2, 3, 9, 8)]
    out = augment_rois_training([], gt, 0.1, rng, 16)
    assert [r.box for r in out] == gt
    # half-cell offsets keep the search boxes disjoint from integer random boxes
    rois = [RoI(BBox(0.5, 0.5, 1.5 + i % 10, 1.5 + i // 10), 0.5) for i in range(100)]
    out = augment_rois_training(rois, [], 0.1, rng, 16)
    randoms = [r for r in out if r.source is RoISource.RANDOM]
    assert len(out) == 100 + len(randoms)
    assert len(randoms) == 10


def test_augment_dedups_gt_already_present():
    rng = np.random.default_rng(0)
    box = BBox(1, 1, 4, 4)
    out = augment_rois_training([RoI(box, 0.3)], [box], 0.0, rng, 8)
    assert len(out) == 1 and out[0].score == 0.3


def test_bbox_pixel_conversion_round_trip():
    b = BBox(1, 2, 5, 7)
    assert BBox.from_pixels(b.to_pixels(4), 4) == b
    with pytest.raises(ValueError):
        BBox(3, 1, 3, 5)
