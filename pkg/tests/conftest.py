import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gmdm.filter_bank import FilterBank, init_filters
from gmdm.gmm_core import MeanGrid
from gmdm.patch_model import PatchModel

settings.register_profile(
    "gmdm", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("gmdm")

ACCEPTANCE = []


def record_acceptance(number, name, passed, detail=""):
    ACCEPTANCE.append((number, name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}  {detail}")


def random_orthogonal_filters(rng, a, J, zero_mean=False):
    """Pairwise-orthogonal columns with random norms in [0.5, 2]."""
    M = rng.standard_normal((a, a))
    if zero_mean:
        M[:, 0] = 1.0
    Q, _ = np.linalg.qr(M)
    cols = Q[:, 1 : J + 1] if zero_mean else Q[:, :J]
    return cols * rng.uniform(0.5, 2.0, size=J)


def toy_model(rng, a=4, J=3, L=3, gamma=1.0, sigma0=None, zero_mean=False, logit_scale=1.0):
    grid = MeanGrid(L, gamma, sigma0)
    K = random_orthogonal_filters(rng, a, J, zero_mean)
    return PatchModel(FilterBank(K), logit_scale * rng.standard_normal((J, L)), grid)


def gaussian_model(rng, a=4, J=3, sigma0=0.3, zero_mean=True):
    """Experts concentrated on the central mean 0 of a 3-point grid."""
    grid = MeanGrid(3, 1.0, sigma0)
    K = random_orthogonal_filters(rng, a, J, zero_mean)
    logits = np.tile([-1e4, 0.0, -1e4], (J, 1))
    return PatchModel(FilterBank(K), logits, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return PatchModel.initial(init_filters(3, seed=0), MeanGrid(25, 1.0))
