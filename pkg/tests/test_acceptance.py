"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed again in the terminal summary).
Full training runs are cached under ``runs/acceptance`` (override with
``DENET_ACCEPTANCE_DIR``), keyed by a hash of the package source, so a rerun on
unchanged code reuses them. Delete the directory to force retraining.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from denet import data as dataio
from denet.evaluate import coverage, nms
from denet.gradcheck import TOLERANCE, run_suite
from denet.head import DetectionHit
from denet.model import DeNet, ModelConfig, full_scale_config
from denet.pipeline import evaluate_model, timing_run
from denet.sampler import BBox, score_box, search_boxes
from denet.trainer import LossWeights, TrainConfig, calibrate_lambdas, forward_batch, joint_loss, model_from_checkpoint, prepare_batch, train

from oracles import brute_force_rois, reference_nms

RESULTS: dict[int, str] = {}

PKG_ROOT = Path(__file__).resolve().parents[1]
RUN_ROOT = Path(os.environ.get("DENET_ACCEPTANCE_DIR", PKG_ROOT / "runs" / "acceptance"))
TRAIN_SCENES, TEST_SCENES = 2000, 200
TRAIN_SEED, TEST_SEED = 0, 1
WALL_LIMIT_S = 45 * 60


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)


def _source_fingerprint() -> str:
    h = hashlib.sha256()
    for p in sorted((PKG_ROOT / "src" / "denet").glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _scenes(seed: int, count: int):
    return [dataio.gen_scene([seed, i]) for i in range(count)]


_cache: dict = {}


def train_samples():
    if "train" not in _cache:
        _cache["train"] = _scenes(TRAIN_SEED, TRAIN_SCENES)
    return _cache["train"]


def heldout_samples():
    if "test" not in _cache:
        _cache["test"] = _scenes(TEST_SEED, TEST_SCENES)
    return _cache["test"]


def trained_run(name: str, variant: str) -> tuple[DeNet, Path, float]:
    """Train (or reuse) a full desk run; returns model, run dir and wall-clock seconds."""
    out = RUN_ROOT / name
    stamp = out / "stamp.json"
    key = {"fingerprint": _source_fingerprint(), "variant": variant, "scenes": TRAIN_SCENES, "seed": TRAIN_SEED}
    if stamp.exists() and (out / "model.ckpt").exists():
        saved = json.loads(stamp.read_text())
        if saved.get("key") == key:
            model = model_from_checkpoint(dataio.load_checkpoint(out / "model.ckpt"))[0]
            return model, out, saved["seconds"]
    cfg = TrainConfig.scaled(30, seed=0)
    model = DeNet(ModelConfig.for_variant(variant, N=8, seed=0))
    t0 = time.perf_counter()
    train(train_samples(), model, cfg, LossWeights(), out)
    seconds = time.perf_counter() - t0
    stamp.write_text(json.dumps({"key": key, "seconds": seconds}, indent=1) + "\n")
    return model, out, seconds


def _eval(name: str, model: DeNet):
    if name not in _cache:
        _cache[name] = evaluate_model(model, heldout_samples())[0]
    return _cache[name]


# --------------------------------------------------------------------------


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    errors = run_suite(seed=0)
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(v < TOLERANCE for v in errors.values()) and seconds < 120
    record(1, ok, f"gradient suite: {len(errors)} ops, worst {worst} {errors[worst]:.2e} (< 1e-4), {seconds:.1f} s (< 120 s)")
    assert ok


def test_c02_sampler_matches_brute_force():
    rng = np.random.default_rng(2024)
    checked = mismatches = 0
    for _ in range(200):
        h, w = rng.integers(4, 13, size=2)
        p = rng.uniform(0, 1, (4, h, w))
        for lam in (0.0, 0.1):
            for n in (2, 4, 8):
                boxes, scores = search_boxes(p, lam, int(h * w), n)
                expect = brute_force_rois(p, lam, n)
                same = [tuple(int(v) for v in b) for b in boxes] == [b for b, _ in expect] and list(scores) == [s for _, s in expect]
                mismatches += not same
                checked += 1
    record(2, mismatches == 0, f"sampler vs brute force: {checked - mismatches}/{checked} (map, lambda, N) cases identical")
    assert mismatches == 0


def test_c03_score_self_consistency():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10**4):
        h, w = rng.integers(2, 17, size=2)
        p = rng.uniform(0, 1, (4, h, w))
        x1, x2 = np.sort(rng.choice(w, 2, replace=False))
        y1, y2 = np.sort(rng.choice(h, 2, replace=False))
        direct = p[0, y1, x1] * p[1, y1, x2] * p[2, y2, x1] * p[3, y2, x2]
        worst = max(worst, abs(score_box(p, BBox(float(x1), float(y1), float(x2), float(y2))) - direct))
    record(3, worst <= 1e-12, f"score self-consistency: max |diff| {worst:.1e} over 10^4 pairs (<= 1e-12)")
    assert worst <= 1e-12


def test_c04_nms_matches_reference():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(500):
        count = int(rng.integers(0, 201))
        xy = rng.integers(0, 60, (count, 2)).astype(float)
        wh = rng.integers(2, 30, (count, 2)).astype(float)
        conf = np.round(rng.uniform(0, 1, count), 2)
        cls = rng.integers(5, size=count)
        hits = [DetectionHit((*a, *(a + b)), np.zeros(0), int(c), float(f)) for a, b, f, c in zip(xy, wh, conf, cls)]
        bad += nms(hits, 0.5) != reference_nms(hits, 0.5)
    record(4, bad == 0, f"NMS vs O(n^2) reference: {500 - bad}/500 sets identical")
    assert bad == 0


def test_c05_coverage_monotone_in_n():
    model, _, _ = trained_run("plain", "plain")
    mc = model.config
    samples = heldout_samples()[:100]
    images = np.stack([s.image for s in samples])
    probs = np.concatenate([model.forward_base(images[i : i + 25], train=False).corner_probs for i in range(0, 100, 25)]).astype(np.float64)
    ns = (4, 8, 16, 24, 32)
    cov = {}
    for n in ns:
        hit = total = 0
        for s, p in zip(samples, probs):
            boxes, _ = search_boxes(p, mc.lambda_thresh, mc.M, n)
            px = (boxes.reshape(-1, 4) + 0.5) * mc.corner_stride
            hit += coverage(px, [b for _, b in s.annotations], 0.5) * len(s.annotations)
            total += len(s.annotations)
        cov[n] = hit / total
    ok = all(cov[a] <= cov[b] for a, b in zip(ns, ns[1:]))
    record(5, ok, "coverage@0.5 by N: " + ", ".join(f"{n}:{100 * v:.1f}%" for n, v in cov.items()) + " (non-decreasing)")
    assert ok


def test_c06_loss_calibration():
    model = DeNet(ModelConfig(seed=0))
    cfg = TrainConfig.scaled(30, seed=0)
    samples = train_samples()
    order = np.random.default_rng([cfg.seed, 0]).permutation(len(samples))
    images, gts = prepare_batch(samples, order[: cfg.batch_size], 0, cfg, 64)
    w = calibrate_lambdas(model, images, gts, cfg)
    res = forward_batch(model, images, gts, np.random.default_rng([cfg.seed, 0, 0, 7]), cfg)
    norm = joint_loss(*res.inputs, weights=w, images=len(gts)).normalized()
    ok = all(abs(v - 1.0) <= 0.01 for v in norm.values())
    record(6, ok, "normalized components after calibration: " + ", ".join(f"{k} {v:.4f}" for k, v in norm.items()) + " (1 +/- 0.01)")
    assert ok


def test_c07_desk_training():
    model, _, seconds = trained_run("plain", "plain")
    rep = _eval("plain", model)
    cov, map50 = rep.coverage_at[0.5], rep.map_50
    ok = cov >= 0.90 and map50 >= 0.60 and seconds <= WALL_LIMIT_S
    record(7, ok, f"plain desk run: coverage@0.5 {cov:.3f} (>= 0.90), MAP@0.5 {map50:.3f} (>= 0.60), train {seconds / 60:.1f} min (<= 45)")
    assert ok


def test_c08_skip_parity():
    plain, _, _ = trained_run("plain", "plain")
    skip, _, _ = trained_run("skip", "skip")
    a, b = _eval("plain", plain).coverage_at[0.5], _eval("skip", skip).coverage_at[0.5]
    ok = abs(a - b) <= 0.05
    record(8, ok, f"skip coverage@0.5 {b:.3f} vs plain {a:.3f}, |diff| {abs(a - b):.3f} (<= 0.05)")
    assert ok


def test_c09_timing_harness():
    model, _, _ = trained_run("plain", "plain")
    images = np.stack([s.image for s in heldout_samples()[:64]])
    desk = timing_run(model, images, batch_size=8)
    gap = abs(sum(desk.stages.values()) - desk.total) / desk.total
    big = DeNet(full_scale_config(seed=0))
    size = big.config.input_size
    scaled = np.stack([np.repeat(np.repeat(im, size // 64, axis=1), size // 64, axis=2) for im in images[:3]])
    big_t = timing_run(big, scaled, batch_size=1)
    full_gap = abs(sum(big_t.stages.values()) - big_t.total) / big_t.total
    largest = max(big_t.stages, key=big_t.stages.get)
    ok = gap <= 0.05 and full_gap <= 0.05 and largest == "estimate_corners"
    fr = big_t.fractions()
    record(
        9,
        ok,
        f"stage sum within {100 * gap:.2f}% (desk) / {100 * full_gap:.2f}% (full scale) of total; "
        f"full-scale largest stage {largest} at {100 * fr[largest]:.0f}%",
    )
    assert ok


def test_c10_determinism():
    _, a, _ = trained_run("plain", "plain")
    _, b, _ = trained_run("plain_repeat", "plain")
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in ("model.ckpt", "metrics.csv")}
    ok = all(same.values())
    record(10, ok, "two full seeded runs: " + ", ".join(f"{f} {'identical' if v else 'DIFFERENT'}" for f, v in same.items()))
    assert ok
