import numpy as np
import pytest

from stereodrop.synthgen import SceneSpec, generate_sample


def tiny_samples(n=2, seed=0, mode="mixed"):
    return [generate_sample(SceneSpec(seed=seed + i, width=32, height=16, disparity_range=(1, 4), drop_mode=mode))
            for i in range(n)]


@pytest.fixture
def tiny():
    return tiny_samples()

