import numpy as np
import pytest

from rmtqubit.dynamics import Ensemble, ModelParams

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[name] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: [int(p) if p.isdigit() else p for p in s.replace("-", " ").split()]):
        passed, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {name}: {detail}")


@pytest.fixture(scope="session")
def small_params():
    return ModelParams(delta=0.7, lam=0.25, env_dim=12, n_samples=10, master_seed=11)


@pytest.fixture(scope="session")
def small_ensemble(small_params):
    return Ensemble.uniform(small_params, dt=0.05, n_chunks=1)


@pytest.fixture(scope="session")
def small_traj(small_ensemble):
    return small_ensemble.trajectory()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
