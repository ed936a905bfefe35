import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from denet.evaluate import (
    IOU_RANGE,
    EvalReport,
    TimingBreakdown,
    average_precision,
    class_ap,
    coverage,
    evaluate_hits,
    iou,
    map_range,
    nms,
    per_class_ap,
)
from denet.head import DetectionHit

from oracles import reference_nms


def hit(box, conf, cls=0):
    return DetectionHit(tuple(float(v) for v in box), np.zeros(0), cls, float(conf))


def random_hits(rng, count, classes=5):
    xy = rng.integers(0, 50, (count, 2)).astype(float)
    wh = rng.integers(2, 30, (count, 2)).astype(float)
    conf = np.round(rng.uniform(0, 1, count), 2)  # coarse values force confidence ties
    return [hit((*p, *(p + s)), c, int(k)) for p, s, c, k in zip(xy, wh, conf, rng.integers(classes, size=count))]


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)


box = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)).map(lambda b: (b[0], b[1], b[0] + b[2], b[1] + b[3]))


@given(box, box)
def test_iou_symmetric_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


def test_nms_examples():
    assert nms([hit((0, 0, 4, 4), 0.8), hit((0, 0, 4, 4), 0.9)]) == [hit((0, 0, 4, 4), 0.9)]
    disjoint = [hit((0, 0, 2, 2), 0.5), hit((5, 5, 7, 7), 0.6), hit((10, 0, 12, 2), 0.7)]
    assert len(nms(disjoint)) == 3


def test_nms_matches_reference_on_100_hits():
    rng = np.random.default_rng(0)
    hits = random_hits(rng, 100)
    assert nms(hits, 0.5) == reference_nms(hits, 0.5)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_nms_subset_with_low_overlap(seed, thr):
    rng = np.random.default_rng(seed)
    hits = random_hits(rng, 40)
    kept = nms(hits, thr)
    assert all(any(k is h for h in hits) for k in kept)
    for a, b in itertools.combinations(kept, 2):
        if a.class_id == b.class_id:
            assert iou(a.box, b.box) < thr


def test_coverage_examples():
    gt = [(0, 0, 4, 4), (10, 10, 20, 20)]
    assert coverage(gt + [(1, 1, 2, 2)], gt) == 1.0
    assert coverage([], gt) == 0.0
    assert coverage([(0, 0, 1, 1)], []) == 1.0
    # IoU 0.6 with the first box, 0.4 best with the second
    rois = [(0, 0, 4, 4 / 0.6), (10, 10, 20, 10 + 10 * 0.4)]
    assert iou(rois[0], gt[0]) == pytest.approx(0.6) and iou(rois[1], gt[1]) == pytest.approx(0.4)
    assert coverage(rois, gt, 0.5) == 0.5


def test_coverage_is_strict():
    assert coverage([(0, 0, 2, 4)], [(0, 0, 4, 4)], 0.5) == 0.0


@given(st.lists(box, max_size=8), st.lists(box, max_size=8), st.lists(box, min_size=1, max_size=5))
def test_coverage_monotone_under_inclusion(a, extra, gt):
    assert coverage(a + extra, gt) >= coverage(a, gt)


def test_perfect_detector_scores_one():
    gt = [[(0, (0, 0, 5, 5)), (1, (10, 10, 20, 18))], [(2, (3, 3, 9, 9))]]
    hits = [[hit(b, 1.0, c) for c, b in img] for img in gt]
    for t in IOU_RANGE:
        assert average_precision(hits, gt, t) == 1.0
    assert map_range(hits, gt) == 1.0


def test_disjoint_hits_score_zero():
    gt = [[(0, (0, 0, 5, 5))]]
    assert average_precision([[hit((20, 20, 30, 30), 0.9)]], gt) == 0.0


def test_three_hits_two_gt_hand_enumerated():
    gt = [[(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))]]
    hits = [[hit((0, 0, 10, 10), 0.9), hit((50, 50, 60, 60), 0.8), hit((20, 20, 30, 30), 0.7)]]
    # ranks: TP, FP, TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    # all-points area: 0.5 * 1 + 0.5 * 2/3
    assert class_ap(hits, gt, 0, 0.5) == pytest.approx(0.5 + 1 / 3)
    # 11-point: recall thresholds 0..0.5 take max precision 1, 0.6..1 take 2/3
    assert class_ap(hits, gt, 0, 0.5, "11point") == pytest.approx((6 * 1 + 5 * 2 / 3) / 11)


def test_duplicate_hit_is_false_positive():
    gt = [[(0, (0, 0, 10, 10))]]
    hits = [[hit((0, 0, 10, 10), 0.9), hit((0, 0, 10, 9), 0.8)]]
    assert class_ap(hits, gt, 0, 0.5) == 1.0
    hits = [[hit((0, 0, 10, 9), 0.9), hit((0, 0, 10, 10), 0.8)]]
    assert class_ap(hits, gt, 0, 0.95) == pytest.approx(0.5)


def test_class_without_gt_is_excluded():
    gt = [[(0, (0, 0, 10, 10))]]
    hits = [[hit((0, 0, 10, 10), 0.9, 0), hit((0, 0, 5, 5), 0.9, 2)]]
    assert per_class_ap(hits, gt, 0.5, class_count=3) == {0: 1.0}
    assert average_precision(hits, gt, 0.5, 3) == 1.0


def scene_strategy():
    return st.integers(0, 2**32 - 1).map(_random_scene)


def _random_scene(seed):
    rng = np.random.default_rng(seed)
    gt, hits = [], []
    for _ in range(3):
        g = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(4, 20, 2)
            g.append((int(rng.integers(3)), (x, y, x + w, y + h)))
        hs = []
        for c, (x1, y1, x2, y2) in g:
            for _ in range(rng.integers(0, 3)):
                j = rng.normal(0, 2, 4)
                hs.append(hit((x1 + j[0], y1 + j[1], x2 + abs(j[2]) + 0.5, y2 + abs(j[3]) + 0.5), rng.uniform(), c))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 40, 2)
            hs.append(hit((x, y, x + 8, y + 8), rng.uniform(), int(rng.integers(3))))
        gt.append(g)
        hits.append(hs)
    return hits, gt


@given(scene_strategy())
def test_ap_depends_only_on_ranking(scene):
    hits, gt = scene
    squashed = [[hit(h.box, h.confidence**3 * 0.5 + 0.1, h.class_id) for h in img] for img in hits]
    assert average_precision(hits, gt, 0.5) == pytest.approx(average_precision(squashed, gt, 0.5), abs=1e-12)


@given(scene_strategy())
def test_map_range_not_above_map50(scene):
    hits, gt = scene
    assert map_range(hits, gt) <= average_precision(hits, gt, 0.5) + 1e-12


def test_report_csv_has_map50():
    gt = [[(0, (0, 0, 10, 10))]]
    rep = evaluate_hits([[hit((0, 0, 10, 10), 1.0)]], gt, [np.array([[0, 0, 10, 10]])], 3)
    text = rep.to_csv()
    assert text.splitlines()[0] == "metric,value"
    assert "map_50,1.000000" in text
    assert rep.coverage_at[0.5] == 1.0
    assert "map_50" in rep.to_table()
    assert isinstance(rep, EvalReport)


def test_timing_csv():
    t = TimingBreakdown({"estimate_corners": 3.0, "generate_roi": 0.5, "classify_roi": 1.0, "estimate_instances": 0.5}, 5.0, 4)
    lines = t.to_csv().splitlines()
    assert lines[0] == "stage,ms_per_image,fraction"
    assert lines[1] == "estimate_corners,3.0000,0.6000"
    assert lines[-1].startswith("total,5.0000")
