import numpy as np

from conftest import tiny_config
from denet import data as dataio
from denet.evaluate import TIMING_STAGES
from denet.model import DeNet, ModelConfig
from denet.pipeline import detect, evaluate_model, timing_run


def test_detect_shapes_and_order():
    model = DeNet(tiny_config())
    images = np.stack([dataio.gen_scene(i, dataio.GenConfig(image_size=32, min_size=8, max_size=16)).image for i in range(3)])
    results = detect(model, images)
    assert len(results) == 3
    for r in results:
        assert len(r.rois) <= model.config.N**2
        assert list(r.scores) == sorted(r.scores, reverse=True)
        confs = [h.confidence for h in r.hits]
        assert confs == sorted(confs, reverse=True)
        for h in r.hits:
            assert 0 <= h.box[0] <= h.box[2] <= 32


def test_evaluate_model_report():
    model = DeNet(tiny_config())
    samples = [dataio.gen_scene(i, dataio.GenConfig(image_size=32, min_size=8, max_size=16)) for i in range(4)]
    report, results = evaluate_model(model, samples)
    assert 0.0 <= report.map_50 <= 1.0 and len(results) == 4
    assert set(report.coverage_at) == {0.5, 0.6, 0.7, 0.8, 0.9}


def test_timing_accounts_for_total():
    model = DeNet(ModelConfig())
    images = np.stack([dataio.gen_scene(i).image for i in range(32)])
    t = timing_run(model, images, batch_size=8)
    assert set(t.stages) == set(TIMING_STAGES)
    assert all(v >= 0 for v in t.stages.values())
    assert abs(sum(t.stages.values()) - t.total) <= 0.05 * t.total
    # stability between repeated runs on the same input
    totals = [timing_run(model, images, batch_size=8).total for _ in range(2)]
    assert abs(totals[0] - totals[1]) < 0.2 * max(totals)
