import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from weightspace.checkpoint_store import WeightCheckpoint

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")


def make_ckpt(shapes, seed=0, names=None):
    rng = np.random.default_rng(seed)
    names = names or [f"layer{i}" for i in range(len(shapes))]
    return WeightCheckpoint.from_arrays(
        [(n, rng.normal(size=s).astype(np.float32)) for n, s in zip(names, shapes)]
    )


@pytest.fixture
def ckpt3():
    return make_ckpt([(4, 3), (3,), (2, 3)], seed=1, names=["fc.weight", "fc.bias", "head.weight"])


@pytest.fixture
def arange35():
    return WeightCheckpoint.from_arrays([("w", np.arange(1, 16, dtype=np.float32).reshape(3, 5))])
