import numpy as np
import pytest

from monosf.synthetic import Box, SceneSpec, render


@pytest.fixture(scope="session")
def static_gt():
    return render(SceneSpec(seed=0))


@pytest.fixture(scope="session")
def box_gt():
    spec = SceneSpec(seed=1, boxes=[Box(center=[0.45, 0.45, 6.4], size=[2.4, 2.4, 0.8], motion_translation=[0.3, 0.0, -1.0])])
    return render(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
