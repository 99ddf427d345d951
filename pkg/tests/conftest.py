import numpy as np
import pytest

from seabed_mdn.mdn_core import MixtureParams


def random_mixture(rng, n_kernels=4, dim=9, sigma_range=(0.05, 0.4), spread=1.0):
    alpha = rng.dirichlet(np.ones(n_kernels))
    sigma = rng.uniform(*sigma_range, size=n_kernels)
    mu = rng.uniform(0.3, 0.3 + 2.2 * spread, size=(n_kernels, dim))
    return MixtureParams(alpha, sigma, mu)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
