import numpy as np
import pytest

from connflow.data import synthetic_gaussian_tasks
from connflow.nn import LayerSpec, Network, init_network


def random_net(rng, max_layers=3, max_dim=16, activations=("relu", "tanh", "identity")):
    depth = int(rng.integers(1, max_layers + 1))
    dims = [int(d) for d in rng.integers(2, max_dim + 1, size=depth + 1)]
    hidden = str(rng.choice(activations))
    out = str(rng.choice(["softmax_output", "identity"]))
    return init_network(dims, hidden, out, seed=int(rng.integers(1 << 31)))


def max_rel_err(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_tasks():
    return synthetic_gaussian_tasks(3, classes=3, dim=8, separation=4.0, seed=7, n_train=240, n_eval=120)


@pytest.fixture
def tiny_net():
    return init_network([8, 12, 10, 3], "tanh", seed=3)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, verdict: str, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number:2d}: {verdict:4s} {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
