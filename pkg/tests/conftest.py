import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tastekit.numkit import Rng
from tastekit.predictors import MlpPredictor
from tastekit.score_models import IsotropicGaussian


@pytest.fixture
def std_normal_2d():
    return IsotropicGaussian.standard(2)


@pytest.fixture
def linear_task_predictor():
    """f(x) = x2 - x1, the 2-d reference task."""
    return MlpPredictor.linear([-1.0, 1.0])


@pytest.fixture
def tanh_net():
    return MlpPredictor.build(2, [32, 16], "tanh", Rng(7))
