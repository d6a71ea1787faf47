import numpy as np
import pytest

from vrkf.experiments import Example1
from vrkf.statespace import LinearModel


@pytest.fixture
def scalar_model() -> LinearModel:
    """
    A scalar random walk observed directly, with unit noise.
    """

    return LinearModel(A=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]])


@pytest.fixture
def example1_model() -> LinearModel:
    return Example1(case=1).get_model()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)
