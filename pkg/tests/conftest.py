import numpy as np
import pytest

from spdiff.corruption import build_schedule
from spdiff.spectrum import SpectrumFit

# canonical natural-image spectrum used throughout the suite
CIFAR_FIT = SpectrumFit(7.7, -0.3, 2.0)


@pytest.fixture
def cifar_fit():
    return CIFAR_FIT


@pytest.fixture
def sched8():
    return build_schedule(CIFAR_FIT, 8, 8, 100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def spd_matrix(rng, dim, spread=1.5):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    w = np.exp(rng.uniform(-spread, spread, dim))
    a = (q * w) @ q.T
    return 0.5 * (a + a.T)
