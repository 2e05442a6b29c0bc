import numpy as np
import pytest

from dyncfg.diffusion import NoiseSchedule
from dyncfg.world import ClassMixture, MixtureWorld, default_world, hard_world


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule.cosine(200)


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def hard():
    return hard_world()


@pytest.fixture(scope="session")
def three_component():
    """Two classes, three anisotropic components in 2-D."""
    c0 = ClassMixture(
        np.array([0.3, 0.7]),
        np.array([[-1.5, 0.5], [0.5, -1.0]]),
        np.array([[[0.5, 0.2], [0.2, 0.3]], [[0.4, -0.1], [-0.1, 0.6]]]),
    )
    c1 = ClassMixture(np.array([1.0]), np.array([[1.2, 1.4]]), np.array([[[0.7, 0.25], [0.25, 0.35]]]))
    return MixtureWorld((c0, c1), np.array([0.4, 0.6]), name="three")


def standard_normal_world(d=2):
    return MixtureWorld((ClassMixture(np.array([1.0]), np.zeros((1, d)), np.eye(d)[None]),), np.array([1.0]))
