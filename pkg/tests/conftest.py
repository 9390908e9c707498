import numpy as np
import pytest

from clusterspearman.dataset import ClusteredDataset

# verdict lines of the acceptance criteria, repeated in the terminal summary
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def latent_dataset(seed, n=30, k=(2, 6), rho_b=0.5, rho_w=0.3, digits=None):
    """Normal cluster effects plus normal deviations; ``digits`` rounds to create ties."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(k[0], k[1] + 1, n) if isinstance(k, tuple) else np.full(n, k)
    u = rng.multivariate_normal([0.0, 0.0], [[1.0, rho_b], [rho_b, 1.0]], n)
    r = rng.multivariate_normal([0.0, 0.0], [[1.0, rho_w], [rho_w, 1.0]], sizes.sum())
    cl = np.repeat(np.arange(n), sizes)
    x = u[cl, 0] + r[:, 0]
    y = u[cl, 1] + r[:, 1]
    if digits is not None:
        x, y = np.round(x, digits), np.round(y, digits)
    return ClusteredDataset.from_arrays([f"c{i}" for i in cl], x, y)


@pytest.fixture
def small_ds():
    return latent_dataset(11, n=12, k=(2, 5), digits=1)


@pytest.fixture
def medium_ds():
    return latent_dataset(5, n=60, k=(3, 8), rho_b=0.6, rho_w=0.4)
