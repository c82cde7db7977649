import numpy as np
import pytest

from nuq.phantom import PhantomSpec, simulate_signal
from nuq.posterior import fit_volume


def phantom(sigma=0.0, seed=0, dims=(6, 6, 6), **kw):
    return simulate_signal(PhantomSpec(dims=dims, sigma=sigma, seed=seed, **kw))


@pytest.fixture(scope="session")
def clean_phantom():
    return phantom(0.0)


@pytest.fixture(scope="session")
def noisy_phantom():
    return phantom(0.05, seed=3)


@pytest.fixture(scope="session")
def noisy_posterior(noisy_phantom):
    return fit_volume(noisy_phantom[0])


@pytest.fixture(scope="session")
def clean_posterior(clean_phantom):
    return fit_volume(clean_phantom[0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
