import numpy as np
import pytest

from oneshot_pinn.network import ActivationSpec, ArchSpec, init_network


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def small_net_1d():
    return init_network(ArchSpec(1, (10, 10), 1, ActivationSpec("tanh")), seed=0)


@pytest.fixture
def sin_net_2d():
    return init_network(ArchSpec(2, (20, 20), 2, ActivationSpec("sin")), seed=3)


# Iteration counts used when a test needs a trained basis. The ODE families
# train at their benchmark configuration; the PDE families at a reduced count.
DESK_ITERATIONS = {
    "first_order": 10000,
    "second_order": 10000,
    "coupled_osc": 10000,
    "nonlinear_osc": 10000,
    "poisson": 10000,
    "schrodinger": 20000,
}

_TRAINED: dict = {}


@pytest.fixture(scope="session")
def trained():
    """``trained(family, **overrides) -> (params, log, seconds)``, cached per session."""
    import time

    from oneshot_pinn.training import TrainConfig, train_bundles

    def get(family, **overrides):
        overrides.setdefault("iterations", DESK_ITERATIONS[family])
        key = (family, tuple(sorted((k, repr(v)) for k, v in overrides.items())))
        if key not in _TRAINED:
            start = time.perf_counter()
            params, log = train_bundles(TrainConfig(family, **overrides))
            _TRAINED[key] = (params, log, time.perf_counter() - start)
        return _TRAINED[key]

    return get


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE_LINES: dict = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
