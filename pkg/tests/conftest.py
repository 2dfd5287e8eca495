import numpy as np
import pytest

from alert_ects.bench import prepare_dataset
from alert_ects.core import CostModel
from alert_ects.synthetic import make_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    return make_synthetic(n_series=120, length=40, signal_checkpoint=8, seed=3, name="small")


@pytest.fixture(scope="session")
def prepared(small_dataset):
    return prepare_dataset(small_dataset)


def random_posteriors(rng, n, K, C=2):
    P = rng.dirichlet(np.ones(C), size=(n, K))
    return P


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def costs2():
    return CostModel.standard(2, minority=1, T=20, alpha=0.5)


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
