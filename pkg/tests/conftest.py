import numpy as np
import pytest
import torch

from seqamodal.diffusion import ConditionedInput
from seqamodal.scene import SceneSpec, generate_scene
from seqamodal.unet import DenoiserConfig


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the slow (multi-training-run) tier")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: expensive multi-run tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow tier; pass --run-slow to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def simple_scene():
    return generate_scene(SceneSpec(num_objects=3, seed=42), "simple")


@pytest.fixture(scope="session")
def scene_corpus():
    rng = np.random.default_rng(1234)
    scenes = []
    for i in range(20):
        n = int(rng.integers(1, 5))
        scenes.append(generate_scene(
            SceneSpec(num_objects=n, seed=int(rng.integers(0, 2 ** 31))),
            f"corpus_{i:03d}"))
    return scenes


class OracleDenoiser:
    """Returns the exact noise consistent with a known clean target:
    eps = (M_t - sqrt(abar_t) * target) / sqrt(1 - abar_t).

    Usable both as a bare denoiser callable on ConditionedInput and as a
    model in the inference engine (config attribute + (x, t) call)."""

    def __init__(self, schedule, target_signed: torch.Tensor, image_size: int = 32):
        self.schedule = schedule
        self.target = target_signed  # (1, H, W) signed
        self.config = DenoiserConfig(image_size=image_size, base_width=8, depth=1,
                                     time_embed_dim=8)

    def _eps(self, noisy: torch.Tensor, t: int) -> torch.Tensor:
        abar = self.schedule.abar(t)
        return (noisy - np.sqrt(abar) * self.target) / np.sqrt(1.0 - abar)

    def __call__(self, x, t=None):
        if isinstance(x, ConditionedInput):
            return self._eps(x.noisy_mask, int(x.t.reshape(-1)[0].item()))
        return self._eps(x[:, 4:5], int(t.reshape(-1)[0].item()))
