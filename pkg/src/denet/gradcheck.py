"""Finite-difference gradient suite over every differentiable op."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .tensor import (
    RunningMoments,
    Tensor,
    batchnorm,
    conv2d,
    deconv2d,
    gather_cells,
    grad_check,
    linear,
    relu,
    sigmoid,
    smooth_l1_sum,
    softmax,
)
from .trainer import LossWeights, joint_loss

TOLERANCE = 1e-4


def _fresh_moments(c: int) -> RunningMoments:
    return RunningMoments(np.zeros(c), np.ones(c))


def _joint(corner_logits: Tensor, class_logits: Tensor, beta_logits: Tensor) -> Tensor:
    rng = np.random.default_rng(11)
    bern = softmax(corner_logits, axis=2)
    targets = (rng.uniform(size=(2, 4, 3, 3)) < 0.3).astype(np.float64)
    probs = softmax(class_logits, axis=1)
    onehot = np.eye(class_logits.shape[1])[rng.integers(class_logits.shape[1], size=class_logits.shape[0])]
    beta = sigmoid(beta_logits)
    reg = rng.uniform(size=beta.shape)
    valid = np.array([True, False, True, True, False])
    w = LossWeights(lambda_t=100.0).with_normalizers(2.3, 1.7, 0.4)
    return joint_loss(bern, targets, probs, onehot, beta, reg, valid, w, images=2).total


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    # relu and smooth-L1 kinks are kept away from the probe by construction
    away = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    target = rng.uniform(-2, 2, size=(6, 4))
    pred = target + rng.uniform(0.1, 3.0, size=(6, 4)) * rng.choice([-1.0, 1.0], size=(6, 4))
    pred[::3] = target[::3] + rng.uniform(-0.8, 0.8, size=(2, 4))
    mask = np.array([True, True, False, True, True, True])
    moments = RunningMoments(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 2.0, 3))
    ys = rng.integers(0, 4, size=(3, 5))
    xs = rng.integers(0, 4, size=(3, 5))
    return [
        ("conv2d", lambda x, w, b: conv2d(x, w, b, stride=2, pad=1), [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        ("conv2d_1x1", lambda x, w: conv2d(x, w), [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1))]),
        ("deconv2d", lambda x, w, b: deconv2d(x, w, b, stride=2), [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(2)]),
        ("batchnorm_train", lambda x, g, b: batchnorm(x, g, b, _fresh_moments(3), True), [rng.standard_normal((2, 3, 3, 3)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("batchnorm_train_2d", lambda x, g, b: batchnorm(x, g, b, _fresh_moments(3), True), [rng.standard_normal((5, 3)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("batchnorm_eval", lambda x, g, b: batchnorm(x, g, b, moments, False), [rng.standard_normal((2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("relu", relu, [away]),
        ("sigmoid", sigmoid, [rng.standard_normal((3, 4))]),
        ("softmax", lambda x: softmax(x, axis=2), [rng.standard_normal((2, 4, 2, 3))]),
        ("linear", linear, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)]),
        ("soft_l1", lambda p: smooth_l1_sum(p, target, mask), [pred]),
        ("gather_cells", lambda f: gather_cells(f, np.array([0, 1, 1]), ys, xs), [rng.standard_normal((2, 3, 4, 4))]),
        ("joint_loss", _joint, [rng.standard_normal((2, 4, 2, 3, 3)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))]),
    ]


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative analytic-vs-numeric error per op, in double precision."""
    rng = np.random.default_rng(seed)
    return {name: grad_check(fn, inputs, seed=seed) for name, fn, inputs in _cases(rng)}


def report(seed: int = 0) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    errors = run_suite(seed)
    return errors, time.perf_counter() - t0
