import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from denet.model import DeNet, ModelConfig, desk_backbone

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile("repo")


def tiny_config(**kw) -> ModelConfig:
    """32-pixel input, 3-layer backbone: corner stride 2 on a 16x16 map."""
    params = dict(
        input_size=32,
        backbone=desk_backbone((8, 12, 16)),
        deconv_filters=(12, 8),
        corner_stride=2,
        F_s=4,
        N=4,
        M=8,
        head_widths=(16, 8),
    )
    params.update(kw)
    return ModelConfig(**params)


@pytest.fixture
def tiny_model():
    return DeNet(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
