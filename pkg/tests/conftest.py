import numpy as np
import pytest
from threadpoolctl import threadpool_limits


def rand_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def dft_matrix(n):
    """Centered orthonormal DFT matrix built from the definition."""
    idx = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def dft2c_oracle(x):
    H, W = x.shape[-2:]
    return dft_matrix(H) @ x @ dft_matrix(W).T


def ndft_oracle(x, coords):
    """Direct sum over pixels; pixel (i, j) sits at (j - W/2, i - H/2)."""
    H, W = x.shape
    yy = np.arange(H) - H // 2
    xx = np.arange(W) - W // 2
    ph = np.exp(-2j * np.pi * (coords[:, 0:1] * xx[None, :]))  # (M, W)
    pv = np.exp(-2j * np.pi * (coords[:, 1:2] * yy[None, :]))  # (M, H)
    return np.einsum("mh,hw,mw->m", pv, x, ph)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    with threadpool_limits(1):
        yield


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(pytestconfig):
    """Shared list of PASS/FAIL criterion lines, repeated in the terminal summary."""
    return pytestconfig.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
