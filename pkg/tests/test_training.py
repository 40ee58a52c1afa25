import numpy as np
import pytest

from oneshot_pinn.autodiff import Jet2, grad_weights
from oneshot_pinn.network import ActivationSpec, ArchSpec, ConfigError, init_network
from oneshot_pinn.oneshot import LinearOdeOperatorSpec
from oneshot_pinn.problems import training_grid
from oneshot_pinn.training import (
    Adam,
    Bundle,
    TrainConfig,
    UnsupportedOrderError,
    energy_term,
    ode_loss,
    pde_loss,
    train_bundles,
    write_log_csv,
)


def synthetic(fn, dfn=None, ddfn=None):
    """Callable model whose single output is fn(t) with given derivatives."""

    def model(points, request):
        t = points[:, :1]
        return Jet2(fn(t), (dfn(t) if dfn else None,), {(0, 0): ddfn(t) if ddfn else None})

    return model


def synthetic_2d(fn, ftt, fxx):
    def model(points, request):
        y, x = points[:, :1], points[:, 1:]
        return Jet2(fn(y, x), (None, None), {(0, 0): ftt(y, x), (1, 1): fxx(y, x)})

    return model


def first_order(a="1", f="t", u0=1.0):
    return Bundle("first_order", {"a": a, "f": f, "u0": u0}, 0)


# -- optimizer --------------------------------------------------------------


def test_adam_two_steps_by_hand():
    p = np.array([1.0, -2.0])
    opt = Adam(lr=0.1)
    opt.step([p], [np.array([0.5, -1.0])])
    # first bias-corrected step moves every coordinate by lr * sign(g)
    assert np.allclose(p, [0.9, -1.9], atol=1e-9)
    opt.step([p], [np.array([0.25, 2.0])])
    m = 0.9 * 0.1 * np.array([0.5, -1.0]) + 0.1 * np.array([0.25, 2.0])
    v = 0.999 * 0.001 * np.array([0.25, 1.0]) + 0.001 * np.array([0.0625, 4.0])
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(p, np.array([0.9, -1.9]) - step, atol=1e-12)


# -- ODE losses on synthetic heads ------------------------------------------


def test_zero_network_loss_equals_ic_mismatch():
    grid = np.linspace(0, 3, 31)
    zero = synthetic(np.zeros_like, np.zeros_like)
    b = Bundle("first_order", {"a": "1", "f": "t", "u0": 1.0}, 0)
    res = ode_loss(zero, [b], grid)
    assert res.terms["ic"] == pytest.approx(1.0)
    assert res.terms["residual"] == pytest.approx(np.mean(grid**2))


def test_exact_solution_has_zero_loss():
    # psi' + psi = t, psi(0) = 1  ->  psi = t - 1 + 2 e^{-t}
    exact = synthetic(lambda t: t - 1 + 2 * np.exp(-t), lambda t: 1 - 2 * np.exp(-t))
    res = ode_loss(exact, [first_order()], np.linspace(0, 3, 31))
    assert res.loss <= 1e-28


def test_second_order_exact_solution():
    # psi'' + psi' + psi = 1, psi(0) = 2, psi'(0) = -1/2  ->  psi = 1 + e^{-t/2} cos(w t)
    w = np.sqrt(3) / 2

    def g(t):
        return np.exp(-t / 2) * np.cos(w * t)

    def s(t):
        return np.exp(-t / 2) * np.sin(w * t)

    def dg(t):
        return -0.5 * g(t) - w * s(t)

    def ddg(t):
        return -0.5 * dg(t) + 0.5 * w * s(t) - w * w * g(t)

    exact = synthetic(lambda t: 1 + g(t), dg, ddg)
    b = Bundle("second_order", {"a": "1", "a1": "1", "f": "1", "u0": 2.0, "v0": -0.5}, 0)
    assert ode_loss(exact, [b], np.linspace(0, 3, 31)).loss <= 1e-28


def test_order_three_rejected():
    spec = LinearOdeOperatorSpec.__new__(LinearOdeOperatorSpec)
    object.__setattr__(spec, "coefficients", (1.0, 1.0, 1.0, 1.0))
    object.__setattr__(spec, "force", 0.0)
    object.__setattr__(spec, "ics", np.zeros(3))
    with pytest.raises(UnsupportedOrderError):
        ode_loss(synthetic(np.zeros_like), [first_order()], np.linspace(0, 1, 5), specs=[spec])


def test_heads_must_be_contiguous():
    two = [first_order(), Bundle("first_order", {"a": "t", "f": "sin", "u0": 0.0}, 3)]
    with pytest.raises(ConfigError):
        ode_loss(synthetic(lambda t: np.zeros((t.shape[0], 4)), lambda t: np.zeros((t.shape[0], 4))), two, np.linspace(0, 1, 5))


# -- energy -----------------------------------------------------------------


def test_energy_term_hand_values():
    # H(1, 0) = 3/4 ; a head sitting at (2, 2) has H = 2 + 2 + 4 = 8 ; (8 - 0.75)^2
    psi = np.full((4, 1), 2.0)
    assert energy_term(psi, psi, [1.0], [0.0]) == pytest.approx((8 - 0.75) ** 2)
    assert energy_term(np.ones((4, 1)), np.zeros((4, 1)), [1.0], [0.0]) == 0.0


def test_energy_term_on_reference_trajectory():
    from oneshot_pinn.problems import NonlinearOscSpec, rk4_oracle

    t = np.linspace(0, 3, 61)
    ref = rk4_oracle(NonlinearOscSpec(1.3), t)
    assert energy_term(ref["psi"], ref["dpsi"], [1.3], [0.0]) <= 1e-8


# -- PDE losses -------------------------------------------------------------


def test_poisson_zero_network_gives_mean_source_squared():
    grid = training_grid("poisson", 400)
    zero = synthetic_2d(lambda y, x: 0 * x, lambda y, x: 0 * x, lambda y, x: 0 * x)
    b = Bundle("poisson", {"k": 2.0}, 0)
    res = pde_loss(zero, [b], grid)
    T, X = grid.interior.T
    rho = np.sin(2 * np.pi * X) * np.sin(2 * np.pi * T)
    assert res.terms["residual"] == pytest.approx(np.mean(rho**2), rel=1e-12)
    assert res.terms["ic"] == pytest.approx(0.0, abs=1e-28)


def test_poisson_exact_head_vanishes():
    k = 3.0
    c = -1 / (2 * (k * np.pi) ** 2)
    f = lambda y, x: c * np.sin(k * np.pi * x) * np.sin(k * np.pi * y)  # noqa: E731
    lap = lambda y, x: -((k * np.pi) ** 2) * f(y, x)  # noqa: E731
    res = pde_loss(synthetic_2d(f, lap, lap), [Bundle("poisson", {"k": k}, 0)], training_grid("poisson", 400))
    assert res.loss <= 1e-20


def test_missing_boundary_function_raises():
    from oneshot_pinn.oneshot import LinearPdeOperatorSpec

    spec = LinearPdeOperatorSpec(time_coeffs={2: 1.0}, space_coeffs={2: 1.0}, constraints={"initial": lambda y, x: 0 * x})
    zero = synthetic_2d(lambda y, x: 0 * x, lambda y, x: 0 * x, lambda y, x: 0 * x)
    with pytest.raises(ConfigError, match="final"):
        pde_loss(zero, [Bundle("poisson", {"k": 1.0}, 0)], training_grid("poisson", 100), specs=[spec])


# -- gradients through the network ------------------------------------------


@pytest.mark.parametrize("family,params", [
    ("first_order", {"a": "t", "f": "cos", "u0": 1.5}),
    ("second_order", {"a": "3t", "a1": "t^2", "f": "sin", "u0": -1.0, "v0": 2.0}),
])
def test_weight_gradient_matches_finite_differences(family, params):
    p = init_network(ArchSpec(1, (10, 10), 1, ActivationSpec("tanh")), seed=4)
    b = [Bundle(family, params, 0)]
    grid = np.linspace(0, 3, 17)
    grads = grad_weights(ode_loss(p, b, grid).graph)
    rng = np.random.default_rng(0)
    for arr, g in zip(p.arrays(), grads):
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            h = 1e-6 * max(1.0, abs(old))
            arr[idx] = old + h
            up = ode_loss(p, b, grid).loss
            arr[idx] = old - h
            down = ode_loss(p, b, grid).loss
            arr[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(g[idx] - fd) <= 1e-4 * max(1.0, abs(fd))


# -- driver -----------------------------------------------------------------


def test_training_is_deterministic_and_decreasing(tmp_path):
    cfg = TrainConfig("first_order", seed=3, iterations=60, n_bundles=2, widths=(16, 16), log_every=20)
    p1, log1 = train_bundles(cfg)
    p2, log2 = train_bundles(cfg)
    for a, b in zip(p1.arrays(), p2.arrays()):
        assert np.array_equal(a, b)
    assert [r["loss"] for r in log1] == [r["loss"] for r in log2]
    assert log1[-1]["loss"] < log1[0]["loss"]
    assert [r["iteration"] for r in log1] == [0, 20, 40, 60]
    assert p1.provenance["family"] == "first_order" and p1.provenance["seed"] == 3
    text = write_log_csv(log1, tmp_path / "log.csv").read_text().splitlines()
    assert text[0].startswith("iteration,loss") and len(text) == 5


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"collocation": 1}, {"n_bundles": 0}, {"domain": ((1.0, 1.0),)}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig("first_order", **kwargs)


def test_unknown_family():
    with pytest.raises(KeyError, match="unknown family"):
        TrainConfig("heat")


def test_default_bundles_used_for_pdes():
    from oneshot_pinn.training import resolve_bundles

    b = resolve_bundles(TrainConfig("schrodinger", iterations=1))
    assert [x.params for x in b] == [{"sigma": 0.5, "p0": 1.0}, {"sigma": 0.6, "p0": 2.0}, {"sigma": 0.6, "p0": 3.0}]
    assert [x.head for x in b] == [0, 1, 2]
