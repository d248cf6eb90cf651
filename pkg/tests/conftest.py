import numpy as np
import pytest

from vmt_adapter import autodiff as ad
from vmt_adapter.config import ExperimentConfig, ModelConfig, TrainingConfig


@pytest.fixture
def tiny_cfg():
    """Small encoder for fast structural tests (grid 8x8, sides 8/4/2/1)."""
    return ModelConfig(image_size=32, stage_dims=(8, 16, 16, 32), heads=(1, 2, 2, 4), stage_depths=(1, 1, 2, 1), decoder_dim=8)


@pytest.fixture
def small_experiment():
    """64x64 images (the generator's size) with a slim model and a short run."""
    model = ModelConfig(stage_dims=(8, 16, 16, 32), heads=(1, 2, 2, 4), decoder_dim=8)
    training = TrainingConfig(iterations=4, batch_size=2, train_pool=8, eval_size=4, log_every=2)
    return ExperimentConfig(model=model, training=training)


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


def images_for(cfg: ModelConfig, batch: int = 2, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(batch, cfg.in_channels, cfg.image_size, cfg.image_size))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
        passed = sum(" PASS " in line for line in results.values())
        terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
