import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from msf import LatentGrid, ScaleSchedule, VelocityConfig, init_params

torch.set_num_threads(1)

settings.register_profile(
    "ci",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=50,
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, h, w, c) -> LatentGrid:
    return LatentGrid(rng.standard_normal((h, w, c), dtype=np.float32))


@pytest.fixture
def two_scale_schedule():
    return ScaleSchedule(((8, 8), (16, 16)))


@pytest.fixture
def tiny_config(two_scale_schedule):
    return VelocityConfig(
        channels=2,
        scale_sizes=two_scale_schedule.sizes,
        patch_sizes=(2, 2),
        hidden_width=32,
        depth=1,
        heads=2,
        num_classes=4,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)
