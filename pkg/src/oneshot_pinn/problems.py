"""Benchmark families: samplers, operator builders, oracles and evaluation.

Six families are registered in ``FAMILIES``: ``first_order``, ``second_order``,
``coupled_osc``, ``nonlinear_osc``, ``poisson`` and ``schrodinger``. Poisson
uses the network's two inputs as (y, x), i.e. the first input column plays y.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import ActivationSpec, JetBatch, MlpParams, eval_hidden
from .oneshot import (
    CoupledOdeSpec,
    LinearOdeOperatorSpec,
    LinearPdeOperatorSpec,
    SchrodingerSpec,
    apply_factor,
    assemble_coupled_ode,
    assemble_ode,
    assemble_pde,
    assemble_schrodinger,
    factorize_operator,
    finetune_wout_gd,
    ode_targets,
    schrodinger_targets,
    solve_wout,
    split_components,
)

FUNCS: dict[str, Callable] = {
    "1": lambda t: np.ones_like(t),
    "t": lambda t: t,
    "t^2": lambda t: t**2,
    "t^3": lambda t: t**3,
    "3t": lambda t: 3 * t,
    "cos": np.cos,
    "sin": np.sin,
}


class DivergenceError(FloatingPointError):
    pass


class SampleError(ValueError):
    """Sample values outside the family's allowed sets."""


@dataclass(frozen=True)
class NonlinearOscSpec:
    """``psi'' + psi + psi^3 = 0`` with energy ``psi'^2/2 + psi^2/2 + psi^4/4``."""

    psi0: float
    dpsi0: float = 0.0

    @property
    def ics(self) -> np.ndarray:
        return np.array([self.psi0, self.dpsi0])


def hamiltonian(psi, dpsi):
    return 0.5 * dpsi * dpsi + 0.5 * psi * psi + 0.25 * (psi * psi) * (psi * psi)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def _sample_first(rng, n):
    return [
        {"a": str(rng.choice(["t", "t^2", "1"])), "f": str(rng.choice(["cos", "sin", "t"])), "u0": float(rng.uniform(-5, 5))}
        for _ in range(n)
    ]


def _sample_second(rng, n):
    out = []
    for _ in range(n):
        out.append(
            {
                "a": str(rng.choice(["1", "3t", "t^2"])),
                "a1": str(rng.choice(["1", "t^2", "t^3"])),
                "f": str(rng.choice(["1", "t", "cos", "sin"])),
                "u0": float(rng.uniform(-5, 5)),
                "v0": float(rng.uniform(-5, 5)),
            }
        )
    return out


def _sample_coupled(rng, n):
    out = []
    for _ in range(n):
        m = rng.uniform(1, 2)
        k1, k2 = rng.uniform(0.5, 4.5, size=2)
        x1, x2, v1, v2 = rng.uniform(-1.5, 1.5, size=4)
        out.append({"m": m, "k1": k1, "k2": k2, "x1": x1, "x2": x2, "v1": v1, "v2": v2})
    return [{k: float(v) for k, v in d.items()} for d in out]


def _sample_nonlinear(rng, n):
    return [{"u0": float(rng.uniform(0.5, 2.0)), "v0": 0.0} for _ in range(n)]


def _sample_discrete(values):
    def sampler(rng, n):
        if n <= len(values):
            idx = rng.permutation(len(values))[:n]
            return [dict(values[i]) for i in sorted(idx)]
        return [dict(values[i]) for i in rng.integers(0, len(values), size=n)]

    return sampler


POISSON_MODES = [{"k": float(k)} for k in (1, 2, 3, 4)]
SCHRODINGER_SET = [{"sigma": s, "p0": p} for s in (0.5, 0.6, 0.7) for p in (1.0, 2.0, 3.0)]
SCHRODINGER_TRAIN = [{"sigma": 0.5, "p0": 1.0}, {"sigma": 0.6, "p0": 2.0}, {"sigma": 0.6, "p0": 3.0}]


# ---------------------------------------------------------------------------
# Operator builders
# ---------------------------------------------------------------------------


def _check_range(name, value, lo, hi):
    if not lo <= value <= hi:
        raise SampleError(f"{name}={value} outside [{lo}, {hi}]")


def _check_choice(name, value, allowed):
    if value not in allowed:
        raise SampleError(f"{name}={value!r} not in {sorted(allowed)}")


def _build_first(p):
    _check_choice("a", p["a"], {"t", "t^2", "1"})
    _check_choice("f", p["f"], {"cos", "sin", "t"})
    _check_range("u0", p["u0"], -5, 5)
    return LinearOdeOperatorSpec([FUNCS[p["a"]], 1.0], FUNCS[p["f"]], [p["u0"]])


def _build_second(p):
    _check_choice("a", p["a"], {"1", "3t", "t^2"})
    _check_choice("a1", p["a1"], {"1", "t^2", "t^3"})
    _check_choice("f", p["f"], {"1", "t", "cos", "sin"})
    _check_range("u0", p["u0"], -5, 5)
    _check_range("v0", p["v0"], -5, 5)
    return LinearOdeOperatorSpec([FUNCS[p["a"]], FUNCS[p["a1"]], 1.0], FUNCS[p["f"]], [p["u0"], p["v0"]])


def coupling_matrix(m, k1, k2) -> np.ndarray:
    """``A`` of ``psi'' = A psi`` for two masses joined by three springs."""
    return np.array([[-(k1 + k2), k2], [k2, -(k1 + k2)]]) / m


def _build_coupled(p):
    _check_range("m", p["m"], 1, 2)
    _check_range("k1", p["k1"], 0.5, 4.5)
    _check_range("k2", p["k2"], 0.5, 4.5)
    for key in ("x1", "x2", "v1", "v2"):
        _check_range(key, p[key], -1.5, 1.5)
    return CoupledOdeSpec(coupling_matrix(p["m"], p["k1"], p["k2"]), [p["x1"], p["x2"]], [p["v1"], p["v2"]])


def _build_nonlinear(p):
    _check_range("u0", p["u0"], 0.5, 2.0)
    return NonlinearOscSpec(p["u0"], p.get("v0", 0.0))


def poisson_rho(k):
    return lambda y, x: np.sin(k * np.pi * x) * np.sin(k * np.pi * y)


def poisson_solution(k):
    return lambda y, x: -np.sin(k * np.pi * x) * np.sin(k * np.pi * y) / (2 * (k * np.pi) ** 2)


def _poisson_spec(rho, solution) -> LinearPdeOperatorSpec:
    # Dirichlet values are read off the closed form; they vanish for integer k.
    return LinearPdeOperatorSpec(
        time_coeffs={2: 1.0},
        space_coeffs={2: 1.0},
        source=rho,
        constraints={edge: solution for edge in ("initial", "final", "left", "right")},
    )


def _build_poisson(p):
    _check_range("k", p["k"], 1, 4)
    return _poisson_spec(poisson_rho(p["k"]), poisson_solution(p["k"]))


RHO_TEST_WEIGHTS = {k: 0.25 * (-1) ** (k + 1) * 2 * k for k in (1, 2, 3, 4)}


def rho_test(y, x):
    return sum(w * poisson_rho(k)(y, x) for k, w in RHO_TEST_WEIGHTS.items())


def rho_test_solution(y, x):
    return sum(w * poisson_solution(k)(y, x) for k, w in RHO_TEST_WEIGHTS.items())


def poisson_rho_test_spec() -> LinearPdeOperatorSpec:
    return _poisson_spec(rho_test, rho_test_solution)


def _build_schrodinger(p):
    _check_range("sigma", p["sigma"], 0.3, 1.0)
    _check_range("p0", p["p0"], 0.0, 5.0)
    return SchrodingerSpec(p["sigma"], p["p0"], p.get("x0", 0.0))


# ---------------------------------------------------------------------------
# Family registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemFamily:
    """Configuration of one benchmark row.

    ``domain`` is ((t0, t1),) or ((t0, t1), (x0, x1)); ``eval_delta`` the grid
    spacing per input used for reported metrics; ``solve_delta`` the spacing of
    the grid the one-shot system is assembled on (a refinement containing the
    evaluation grid).
    """

    id: str
    input_dim: int
    components: int
    domain: tuple
    eval_delta: tuple
    solve_delta: tuple
    n_bundles: int
    iterations: int
    collocation: int
    activation: ActivationSpec
    test_count: int
    oracle: str
    sampler: Callable = field(repr=False)
    builder: Callable = field(repr=False)
    default_bundles: tuple | None = None

    def sample(self, count: int, seed: int) -> list:
        if count < 0:
            raise ValueError("count must be >= 0")
        return self.sampler(np.random.default_rng(seed), count)

    def build(self, params: dict):
        return self.builder(params)


FAMILIES: dict[str, ProblemFamily] = {
    f.id: f
    for f in [
        ProblemFamily("first_order", 1, 1, ((0.0, 3.0),), (0.1,), (0.01,), 10, 10000, 30,
                      ActivationSpec("tanh"), 1000, "rk4", _sample_first, _build_first),
        ProblemFamily("second_order", 1, 1, ((0.0, 3.0),), (0.05,), (0.01,), 10, 10000, 30,
                      ActivationSpec("tanh"), 1000, "rk4", _sample_second, _build_second),
        ProblemFamily("coupled_osc", 1, 2, ((0.0, 10.0),), (0.01,), (0.01,), 10, 10000, 50,
                      ActivationSpec("sin"), 100, "rk4", _sample_coupled, _build_coupled),
        ProblemFamily("nonlinear_osc", 1, 1, ((0.0, 3.0),), (0.05,), (0.01,), 5, 10000, 60,
                      ActivationSpec("sin"), 30, "rk4", _sample_nonlinear, _build_nonlinear),
        ProblemFamily("poisson", 2, 1, ((0.0, 1.0), (0.0, 1.0)), (0.01, 0.01), (0.01, 0.01), 4, 40000, 1000,
                      ActivationSpec("sin"), 100, "analytic", _sample_discrete(POISSON_MODES), _build_poisson,
                      tuple(POISSON_MODES)),
        ProblemFamily("schrodinger", 2, 2, ((0.0, 1.0), (-10.0, 10.0)), (0.01, 0.1), (0.01, 0.1), 3, 40000, 1000,
                      ActivationSpec("blend", 0.5), 400, "analytic", _sample_discrete(SCHRODINGER_SET),
                      _build_schrodinger, tuple(SCHRODINGER_TRAIN)),
    ]
}


def get_family(family) -> ProblemFamily:
    if isinstance(family, ProblemFamily):
        return family
    try:
        return FAMILIES[family]
    except KeyError:
        raise KeyError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


def build_operator(family, sample):
    """Operator spec for one sample dict (or a ``Bundle`` with ``.params``)."""
    params = getattr(sample, "params", sample)
    return get_family(family).build(params)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def uniform_grid(lo: float, hi: float, delta: float) -> np.ndarray:
    n = int(round((hi - lo) / delta)) + 1
    return np.linspace(lo, hi, n)


@dataclass
class PdeGrid:
    """Tensor grid over (t, x) with named edges.

    ``interior`` holds the residual points; ``edges`` maps ``initial``,
    ``final``, ``left``, ``right`` to the points on that side.
    """

    t: np.ndarray
    x: np.ndarray
    interior: np.ndarray
    edges: dict

    @classmethod
    def build(cls, t: np.ndarray, x: np.ndarray, strict_interior: bool = False) -> "PdeGrid":
        tt = t[1:-1] if strict_interior else t
        xx = x[1:-1] if strict_interior else x
        T, X = np.meshgrid(tt, xx, indexing="ij")
        interior = np.column_stack([T.ravel(), X.ravel()])
        edges = {
            "initial": np.column_stack([np.full(x.size, t[0]), x]),
            "final": np.column_stack([np.full(x.size, t[-1]), x]),
            "left": np.column_stack([t, np.full(t.size, x[0])]),
            "right": np.column_stack([t, np.full(t.size, x[-1])]),
        }
        return cls(t, x, interior, edges)

    @property
    def shape(self) -> tuple:
        return (self.t.size, self.x.size)


def collocation_shape(family: ProblemFamily, count: int) -> tuple:
    """Split a 2-D collocation budget into (n_t, n_x) for a tensor grid."""
    if family.id == "schrodinger":
        nt = max(2, int(round(np.sqrt(count / 2.5))))
    else:
        nt = max(2, int(round(np.sqrt(count))))
    nx = max(2, int(round(count / nt)))
    return nt, nx


def training_grid(family, count: int | None = None, domain=None):
    family = get_family(family)
    count = family.collocation if count is None else count
    domain = family.domain if domain is None else domain
    if family.input_dim == 1:
        return np.linspace(domain[0][0], domain[0][1], count)
    nt, nx = collocation_shape(family, count)
    t = np.linspace(*domain[0], nt)
    x = np.linspace(*domain[1], nx)
    return PdeGrid.build(t, x, strict_interior=(family.id == "poisson"))


def evaluation_grid(family, which: str = "eval"):
    family = get_family(family)
    delta = family.eval_delta if which == "eval" else family.solve_delta
    axes = [uniform_grid(lo, hi, d) for (lo, hi), d in zip(family.domain, delta)]
    if family.input_dim == 1:
        return axes[0]
    return PdeGrid.build(axes[0], axes[1])


def _subset_index(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(fine, coarse - 1e-12)
    if not np.allclose(fine[idx], coarse, atol=1e-9):
        raise ValueError("evaluation grid is not contained in the solve grid")
    return idx


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _rk4(fun, y0: np.ndarray, grid: np.ndarray, dt: float, blowup: float = 1e8) -> np.ndarray:
    """Classic RK4 from ``grid[0]``, sampled exactly at each grid point."""
    grid = np.asarray(grid, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    out = np.empty((grid.size,) + y.shape)
    out[0] = y
    t = grid[0]
    for i in range(1, grid.size):
        span = grid[i] - grid[i - 1]
        n = max(1, int(np.ceil(span / dt - 1e-9)))
        h = span / n
        for _ in range(n):
            k1 = fun(t, y)
            k2 = fun(t + h / 2, y + h / 2 * k1)
            k3 = fun(t + h / 2, y + h / 2 * k2)
            k4 = fun(t + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h
        if not np.all(np.abs(y) < blowup):
            raise DivergenceError(f"RK4 trajectory exceeded {blowup:g} at t={t:.4g}")
        t = grid[i]
        out[i] = y
    return out


def _vector_field(spec):
    if isinstance(spec, LinearOdeOperatorSpec):
        if spec.order == 1:
            def fun(t, y):
                a0, a1 = spec.coefficient_values(np.asarray(t))
                f = np.asarray(spec.force(t)) if callable(spec.force) else spec.force
                return np.array([(f - a0 * y[0]) / a1])
        else:
            def fun(t, y):
                a0, a1, a2 = spec.coefficient_values(np.asarray(t))
                f = np.asarray(spec.force(t)) if callable(spec.force) else spec.force
                return np.array([y[1], (f - a1 * y[1] - a0 * y[0]) / a2])
        y0 = spec.ics.copy()
    elif isinstance(spec, CoupledOdeSpec):
        s = spec.components
        A = spec.A

        def fun(t, y):
            return np.concatenate([y[s:], A @ y[:s]])

        y0 = np.concatenate([spec.psi0, spec.dpsi0])
    elif isinstance(spec, NonlinearOscSpec):
        def fun(t, y):
            return np.array([y[1], -y[0] - y[0] ** 3])

        y0 = spec.ics
    else:
        raise TypeError(f"no explicit form for {type(spec).__name__}")
    return fun, y0


def rk4_oracle(spec, grid, dt_fine: float = 1e-4) -> dict:
    """Reference trajectory of an explicit first/second-order ODE (or system).

    Returns ``{"psi": (m, s), "dpsi": (m, s) or None}``.
    """
    fun, y0 = _vector_field(spec)
    traj = _rk4(fun, y0, grid, dt_fine)
    if isinstance(spec, LinearOdeOperatorSpec) and spec.order == 1:
        return {"psi": traj[:, :1], "dpsi": None}
    s = traj.shape[1] // 2
    return {"psi": traj[:, :s], "dpsi": traj[:, s:]}


def rk4_batch(family, samples: Sequence[dict], grid, dt_fine: float = 1e-3) -> dict:
    """Vectorized RK4 over many samples of one ODE family.

    Returns arrays shaped (m, s, n_samples).
    """
    family = get_family(family)
    n = len(samples)
    grid = np.asarray(grid, dtype=np.float64)
    if n == 0:
        return {"psi": np.zeros((grid.size, 1, 0)), "dpsi": np.zeros((grid.size, 1, 0))}
    if family.id in ("first_order", "second_order"):
        names = sorted(FUNCS)
        idx = {key: np.array([names.index(s[key]) for s in samples]) for key in ("a", "a1", "f") if key in samples[0]}

        def table(t):
            return np.array([FUNCS[nm](np.asarray(t, dtype=float)) for nm in names])

        if family.id == "first_order":
            def fun(t, y):
                v = table(t)
                return np.array([v[idx["f"]] - v[idx["a"]] * y[0]])

            y0 = np.array([[s["u0"] for s in samples]])
        else:
            def fun(t, y):
                v = table(t)
                return np.array([y[1], v[idx["f"]] - v[idx["a1"]] * y[1] - v[idx["a"]] * y[0]])

            y0 = np.array([[s["u0"] for s in samples], [s["v0"] for s in samples]])
        traj = _rk4(fun, y0, grid, dt_fine)
        if family.id == "first_order":
            return {"psi": traj[:, :1, :], "dpsi": None}
        return {"psi": traj[:, :1, :], "dpsi": traj[:, 1:, :]}
    if family.id == "coupled_osc":
        specs = [family.build(s) for s in samples]
        A = np.stack([sp_.A for sp_ in specs])  # (n, 2, 2)

        def fun(t, y):
            return np.concatenate([y[2:], np.einsum("nij,jn->in", A, y[:2])])

        y0 = np.vstack([np.column_stack([s.psi0 for s in specs]), np.column_stack([s.dpsi0 for s in specs])])
        traj = _rk4(fun, y0, grid, dt_fine)
        return {"psi": traj[:, :2, :], "dpsi": traj[:, 2:, :]}
    if family.id == "nonlinear_osc":
        def fun(t, y):
            return np.array([y[1], -y[0] - y[0] ** 3])

        y0 = np.array([[s["u0"] for s in samples], [s.get("v0", 0.0) for s in samples]])
        traj = _rk4(fun, y0, grid, dt_fine)
        return {"psi": traj[:, :1, :], "dpsi": traj[:, 1:, :]}
    raise ValueError(f"family {family.id} has no RK4 oracle")


def poisson_analytic(k, y, x) -> np.ndarray:
    if k <= 0:
        raise ValueError("k must be positive")
    return poisson_solution(k)(np.asarray(y), np.asarray(x))


def fd_laplacian(field: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian on the interior of a square-spaced field."""
    return (
        field[2:, 1:-1] + field[:-2, 1:-1] + field[1:-1, 2:] + field[1:-1, :-2] - 4 * field[1:-1, 1:-1]
    ) / (h * h)


def fd_poisson_solve(rho: Callable, n: int = 101) -> tuple:
    """Second-order finite-difference Poisson solve on [0,1]^2 with zero Dirichlet edges.

    Returns (axis, field) where field[i, j] is at (y=axis[i], x=axis[j]).
    """
    axis = np.linspace(0.0, 1.0, n)
    h = axis[1] - axis[0]
    m = n - 2
    lap1 = sp.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h**2
    eye = sp.identity(m)
    L = sp.kron(eye, lap1) + sp.kron(lap1, eye)
    Y, X = np.meshgrid(axis[1:-1], axis[1:-1], indexing="ij")
    u = spla.spsolve(L.tocsc(), rho(Y, X).ravel())
    field = np.zeros((n, n))
    field[1:-1, 1:-1] = u.reshape(m, m)
    return axis, field


def schrodinger_analytic(sigma, p0, x0, t, x, hbar: float = 1.0, mass: float = 1.0) -> np.ndarray:
    """Exact free wave packet on broadcast (t, x)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    spread = 1 + 1j * hbar * t / (mass * sigma**2)
    energy = p0**2 / (2 * mass)
    num = np.exp(-((x - (x0 + p0 * t / mass)) ** 2) / (2 * sigma**2 * spread)) * np.exp(
        1j * (p0 * x - energy * t) / hbar
    )
    return num / (np.pi**0.25 * np.sqrt(sigma * spread))


# ---------------------------------------------------------------------------
# Oracle cache
# ---------------------------------------------------------------------------

ORACLE_CACHE_VERSION = 1


def cached_oracle(cache_dir, key: dict, compute: Callable[[], dict]) -> dict:
    """Load ``compute()``'s arrays from ``cache_dir`` when the key matches, else compute and store."""
    if cache_dir is None:
        return compute()
    cache_dir = Path(cache_dir)
    payload = json.dumps({"version": ORACLE_CACHE_VERSION, **key}, sort_keys=True, default=str)
    path = cache_dir / f"oracle-{hashlib.sha256(payload.encode()).hexdigest()[:20]}.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as data:
            if str(data["key"]) == payload:
                return {k: data[k] for k in data.files if k != "key"}
    result = compute()
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.savez(path, key=np.array(payload), **{k: v for k, v in result.items() if v is not None})
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """How test equations are solved on the frozen basis.

    ``path``: ``factor`` (reuse one factorization per distinct operator),
    ``qr``, ``normal`` or ``auto``. ``factor_method`` picks the cached
    factorization (``qr`` or ``normal``). ``weights`` rescales named blocks.
    """

    path: str = "factor"
    factor_method: str = "qr"
    ridge: object = "auto"
    weights: dict = field(default_factory=dict)
    bias_column: bool = True
    finetune_epochs: int = 5000
    finetune_lr: float = 1e-3
    newton_steps: int = 12
    oracle: bool = True
    oracle_dt: float = 1e-3


@dataclass
class EvalReport:
    family: str
    rows: list
    inference_time: float
    basis_time: float
    timing_note: str
    extras: dict = field(default_factory=dict)

    def values(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=float)

    def stat(self, key: str) -> tuple:
        v = self.values(key)
        if v.size == 0:
            return (float("nan"), float("nan"))
        return (float(v.mean()), float(v.std()))

    def summary(self) -> dict:
        out = {
            "family": self.family,
            "n_tests": len(self.rows),
            "inference_time": self.inference_time,
            "basis_time": self.basis_time,
            "timing_note": self.timing_note,
        }
        for key in ("residual_mse", "ic_error", "solution_mse"):
            mean, std = self.stat(key)
            out[f"{key}_mean"] = mean
            out[f"{key}_std"] = std
        out.update({k: v for k, v in self.extras.items() if np.isscalar(v)})
        return out


def _ode_basis(params, family, cfg):
    solve_t = evaluation_grid(family, "solve")
    eval_t = evaluation_grid(family, "eval")
    req = ("t",) if family.id == "first_order" else ("t", "tt")
    batch = eval_hidden(params, solve_t[:, None], req, bias_column=cfg.bias_column)
    return batch, _subset_index(solve_t, eval_t)


def _group_by_operator(samples, keys):
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(tuple(s[k] for k in keys), []).append(i)
    return groups


def _linear_ode_eval(params, family, samples, cfg, report_extras):
    start = time.perf_counter()
    batch, eval_idx = _ode_basis(params, family, cfg)
    basis_time = time.perf_counter() - start
    n = len(samples)
    order = 1 if family.id == "first_order" else 2
    keys = ("a",) if order == 1 else ("a", "a1")
    derivs = [batch["H"], batch["H_t"]] + ([batch["H_tt"]] if order == 2 else [])
    t = batch.points[:, 0]
    W_all = np.zeros((batch.shape[1], n))
    paths = [""] * n
    solve_ms = np.zeros(n)

    start = time.perf_counter()
    for _, idx in _group_by_operator(samples, keys).items():
        ops = [family.build(samples[i]) for i in idx]
        system = assemble_ode(batch, ops[0]).set_weights(cfg.weights)
        if cfg.path == "factor":
            t0 = time.perf_counter()
            factor = factorize_operator(system, cfg.ridge, cfg.factor_method)
            sol = apply_factor(factor, ode_targets(batch, ops))
            per = (time.perf_counter() - t0) / len(idx)
            W = sol.W
            for i in idx:
                paths[i] = sol.path
                solve_ms[i] = per * 1e3
        else:
            cols = []
            for i, op in zip(idx, ops):
                sol = solve_wout(assemble_ode(batch, op).set_weights(cfg.weights), cfg.path, cfg.ridge)
                cols.append(sol.W[:, 0])
                paths[i] = sol.path
                solve_ms[i] = sol.wall_time * 1e3
            W = np.column_stack(cols)
        W_all[:, idx] = W
    inference = time.perf_counter() - start

    rows = []
    psi_derivs = [D @ W_all for D in derivs]
    oracle = None
    if cfg.oracle and n:
        oracle = rk4_batch(family, samples, t[eval_idx], cfg.oracle_dt)
    for i, s in enumerate(samples):
        op = family.build(s)
        res = op.apply([d[:, i] for d in psi_derivs], t) - np.asarray(op.force(t))
        ic = np.array([d[0, i] for d in psi_derivs[:order]]) - op.ics
        row = {
            "sample": s,
            "residual_mse": float(np.mean(res[eval_idx] ** 2)),
            "residual_mse_solve_grid": float(np.mean(res**2)),
            "ic_error": float(np.sqrt(np.sum(ic**2))),
            "solve_ms": float(solve_ms[i]),
            "path": paths[i],
        }
        if oracle is not None:
            row["solution_mse"] = float(np.mean((psi_derivs[0][eval_idx, i] - oracle["psi"][:, 0, i]) ** 2))
        rows.append(row)
    return rows, inference, basis_time, "inference excludes basis evaluation (factor reuse per operator)" if cfg.path == "factor" else "inference excludes basis evaluation"


def _coupled_eval(params, family, samples, cfg, extras):
    start = time.perf_counter()
    batch, eval_idx = _ode_basis(params, family, cfg)
    basis_time = time.perf_counter() - start
    t = batch.points[:, 0]
    H, Htt = batch["H"], batch["H_tt"]
    rows = []
    oracle = rk4_batch(family, samples, t[eval_idx], cfg.oracle_dt) if (cfg.oracle and samples) else None
    preds = []
    start = time.perf_counter()
    sols = []
    for s in samples:
        op = family.build(s)
        path = "auto" if cfg.path == "factor" else cfg.path
        sols.append((op, solve_wout(assemble_coupled_ode(batch, op).set_weights(cfg.weights), path, cfg.ridge)))
    inference = time.perf_counter() - start
    for i, (s, (op, sol)) in enumerate(zip(samples, sols)):
        W1, W2 = split_components(sol.W, 2)
        psi = np.column_stack([H @ W1[:, 0], H @ W2[:, 0]])
        psi_tt = np.column_stack([Htt @ W1[:, 0], Htt @ W2[:, 0]])
        res = psi_tt - psi @ op.A.T
        preds.append(psi)
        row = {
            "sample": s,
            "residual_mse": float(np.mean(res[eval_idx] ** 2)),
            "ic_error": float(np.linalg.norm(psi[0] - op.psi0)),
            "solve_ms": sol.wall_time * 1e3,
            "path": sol.path,
        }
        if oracle is not None:
            row["solution_mse"] = float(np.mean((psi[eval_idx] - oracle["psi"][:, :, i]) ** 2))
        rows.append(row)
    extras["predictions"] = preds
    extras["t"] = t
    return rows, inference, basis_time, "inference excludes basis evaluation; one QR per system (operator varies)"


def _nonlinear_eval(params, family, samples, cfg, extras):
    start = time.perf_counter()
    batch, eval_idx = _ode_basis(params, family, cfg)
    basis_time = time.perf_counter() - start
    t = batch.points[:, 0]
    rows = []
    if not samples:
        return rows, 0.0, basis_time, "no tests"
    ics = np.array([[s["u0"] for s in samples], [s.get("v0", 0.0) for s in samples]])
    start = time.perf_counter()
    W0 = nonlinear_warm_start(batch, ics, cfg.newton_steps)
    ft = finetune_wout_gd(
        batch,
        nonlinear_residual,
        ics,
        cfg.finetune_epochs,
        cfg.finetune_lr,
        extra_loss=energy_penalty,
        W0=W0,
        residual_weight=1.0 / t.size,
    )
    inference = time.perf_counter() - start
    psi = batch["H"] @ ft.W
    dpsi = batch["H_t"] @ ft.W
    psi_tt = batch["H_tt"] @ ft.W
    res = psi_tt + psi + psi**3
    oracle = rk4_batch(family, samples, t[eval_idx], cfg.oracle_dt) if cfg.oracle else None
    for i, s in enumerate(samples):
        e0 = hamiltonian(s["u0"], s.get("v0", 0.0))
        row = {
            "sample": s,
            "residual_mse": float(np.mean(res[eval_idx, i] ** 2)),
            "ic_error": float(np.hypot(psi[0, i] - s["u0"], dpsi[0, i] - s.get("v0", 0.0))),
            "energy_drift": float(np.max(np.abs(hamiltonian(psi[:, i], dpsi[:, i]) - e0))),
            "solve_ms": inference * 1e3 / len(samples),
            "path": "gd",
        }
        if oracle is not None:
            row["solution_mse"] = float(np.mean((psi[eval_idx, i] - oracle["psi"][:, 0, i]) ** 2))
        rows.append(row)
    extras["history"] = ft.history
    return rows, inference, basis_time, "inference = gradient fine-tuning on precomputed H (all tests jointly)"


def nonlinear_residual(psi, psi_t, psi_tt, t):
    return psi_tt + psi + psi * psi * psi


def energy_penalty(psi, psi_t, ics):
    e0 = hamiltonian(ics[0], ics[1])[None, :]
    d = hamiltonian(psi, psi_t) - e0
    return (d * d).mean(axis=0)


def nonlinear_warm_start(batch: JetBatch, ics: np.ndarray, newton_steps: int = 12) -> np.ndarray:
    """Initial W_out for ``psi'' + psi + psi^3 = 0`` from one-shot solves only.

    Starts from the linear oscillator ``psi'' + psi = 0`` and then applies
    ``newton_steps`` quasi-linearization sweeps: each solves the linear ODE
    ``psi'' + (1 + 3 psi_k^2) psi = 2 psi_k^3`` on the frozen basis.
    """
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    op = LinearOdeOperatorSpec([1.0, 0.0, 1.0], 0.0, [1.0, 0.0])
    system = assemble_ode(batch, op)
    factor = factorize_operator(system, method="qr")
    t = batch.points[:, 0]
    targets = {"residual": np.zeros((t.size, ics.shape[1])), "ic": ics}
    W = apply_factor(factor, targets).W
    H = batch["H"]
    for _ in range(newton_steps):
        psi = H @ W
        cols = []
        for i in range(ics.shape[1]):
            pk = psi[:, i]
            lin = LinearOdeOperatorSpec([1.0 + 3.0 * pk**2, 0.0, 1.0], 2.0 * pk**3, ics[:, i])
            cols.append(solve_wout(assemble_ode(batch, lin), "auto").W[:, 0])
        W = np.column_stack(cols)
    return W


def _pde_batches(params, grid: PdeGrid, req, edge_req, bias_column):
    interior = eval_hidden(params, grid.interior, req, bias_column)
    edges = {name: eval_hidden(params, pts, edge_req, bias_column) for name, pts in grid.edges.items()}
    # edge batches share the interior provenance so factors built on them match
    return interior, edges


def _poisson_eval(params, family, samples, cfg, extras):
    grid = evaluation_grid(family, "solve")
    start = time.perf_counter()
    interior, edges = _pde_batches(params, grid, ("tt", "xx"), (), cfg.bias_column)
    basis_time = time.perf_counter() - start
    Y, X = interior.points[:, 0], interior.points[:, 1]
    specs = [family.build(s) for s in samples]
    rows = []
    if not specs:
        return rows, 0.0, basis_time, "no tests"
    start = time.perf_counter()
    base = assemble_pde(interior, specs[0], edges).set_weights(cfg.weights)
    targets = poisson_targets(base, interior, edges, specs)
    if cfg.path == "factor":
        factor = factorize_operator(base, cfg.ridge, cfg.factor_method)
        sol = apply_factor(factor, targets)
    else:
        sol = solve_wout(base.with_targets(targets), cfg.path, cfg.ridge)
    inference = time.perf_counter() - start
    pred = interior.H @ sol.W
    lap = (interior["H_tt"] + interior["H_xx"]) @ sol.W
    for i, (s, spec) in enumerate(zip(samples, specs)):
        exact = poisson_solution(s["k"])(Y, X)
        rows.append(
            {
                "sample": s,
                "solution_mse": float(np.mean((pred[:, i] - exact) ** 2)),
                "residual_mse": float(np.mean((lap[:, i] - spec.source(Y, X)) ** 2)),
                "solve_ms": inference * 1e3 / len(specs),
                "path": sol.path,
            }
        )
    extras["shape"] = grid.shape
    return rows, inference, basis_time, "inference excludes basis evaluation (one factor for all k)"


def poisson_targets(system, interior: JetBatch, edges, specs) -> dict:
    Y, X = interior.points[:, 0], interior.points[:, 1]
    out = {"residual": np.column_stack([spec.source(Y, X) for spec in specs])}
    for name, eb in edges.items():
        if any(b.name == name for b in system.blocks):
            out[name] = np.column_stack([spec.constraints[name](eb.points[:, 0], eb.points[:, 1]) for spec in specs])
    return out


def schrodinger_basis(params, grid: PdeGrid, bias_column=True):
    interior = eval_hidden(params, grid.interior, ("t", "xx"), bias_column)
    initial = eval_hidden(params, grid.edges["initial"], (), bias_column)
    edges = {k: eval_hidden(params, grid.edges[k], ("x",), bias_column) for k in ("left", "right")}
    return interior, initial, edges


def _schrodinger_eval(params, family, samples, cfg, extras):
    grid = evaluation_grid(family, "solve")
    start = time.perf_counter()
    interior, initial, edges = schrodinger_basis(params, grid, cfg.bias_column)
    basis_time = time.perf_counter() - start
    specs = [family.build(s) for s in samples]
    rows = []
    if not specs:
        return rows, 0.0, basis_time, "no tests"
    start = time.perf_counter()
    system = assemble_schrodinger(interior, specs[0], initial, edges).set_weights(cfg.weights)
    targets = schrodinger_targets(system, initial, specs)
    if cfg.path == "factor":
        sol = apply_factor(factorize_operator(system, cfg.ridge, cfg.factor_method), targets)
    else:
        sol = solve_wout(system.with_targets(targets), cfg.path, cfg.ridge)
    inference = time.perf_counter() - start
    WR, WI = split_components(sol.W, 2)
    T, X = interior.points[:, 0], interior.points[:, 1]
    pr = interior.H @ WR
    pi = interior.H @ WI
    for i, (s, spec) in enumerate(zip(samples, specs)):
        exact = schrodinger_analytic(spec.sigma, spec.p0, spec.x0, T, X)
        dens = pr[:, i] ** 2 + pi[:, i] ** 2
        rows.append(
            {
                "sample": s,
                "solution_mse": float(np.mean((dens - np.abs(exact) ** 2) ** 2)),
                "wavefunction_mse": float(np.mean(np.abs(pr[:, i] + 1j * pi[:, i] - exact) ** 2)),
                "solve_ms": inference * 1e3 / len(specs),
                "path": sol.path,
            }
        )
    return rows, inference, basis_time, "inference excludes basis evaluation (one factor for all packets)"


_EVALUATORS = {
    "first_order": _linear_ode_eval,
    "second_order": _linear_ode_eval,
    "coupled_osc": _coupled_eval,
    "nonlinear_osc": _nonlinear_eval,
    "poisson": _poisson_eval,
    "schrodinger": _schrodinger_eval,
}


def evaluate(family, params: MlpParams, samples: Sequence[dict], solver: SolverConfig | None = None) -> EvalReport:
    """One-shot (or fine-tuned) solutions and metrics for a list of test samples."""
    family = get_family(family)
    cfg = solver or SolverConfig()
    prov_family = params.provenance.get("family")
    if prov_family is not None and prov_family != family.id:
        raise ValueError(f"checkpoint was trained on {prov_family!r}, not {family.id!r}")
    if params.input_dim != family.input_dim:
        raise ValueError(f"checkpoint input dim {params.input_dim} does not match family {family.id}")
    extras: dict = {}
    rows, inference, basis, note = _EVALUATORS[family.id](params, family, list(samples), cfg, extras)
    return EvalReport(family.id, rows, inference, basis, note, extras)


def held_out_samples(family, count: int | None = None, seed: int = 1) -> list:
    """Held-out test set per family."""
    family = get_family(family)
    count = family.test_count if count is None else count
    if family.id == "poisson":
        return [{"k": float(k)} for k in np.linspace(1, 4, count)]
    if family.id == "schrodinger":
        side = int(round(np.sqrt(count)))
        if side * side != count:
            return family.sample(count, seed)
        return [
            {"sigma": float(s), "p0": float(p)}
            for s in np.linspace(0.4, 0.8, side)
            for p in np.linspace(0.5, 4.0, side)
        ]
    return family.sample(count, seed)


# ---------------------------------------------------------------------------
# Experiments built on the evaluators
# ---------------------------------------------------------------------------


def poisson_superposition(params: MlpParams, solver: SolverConfig | None = None) -> dict:
    """One-shot solve for the four-mode source ``rho_test`` on a mode-trained basis.

    Also solves each mode separately and compares the weighted sum of their
    W_out with the direct ``rho_test`` solution (solver linearity).
    """
    cfg = solver or SolverConfig()
    family = get_family("poisson")
    grid = evaluation_grid(family, "solve")
    interior, edges = _pde_batches(params, grid, ("tt", "xx"), (), cfg.bias_column)
    Y, X = interior.points[:, 0], interior.points[:, 1]
    test_spec = poisson_rho_test_spec()
    base = assemble_pde(interior, test_spec, edges).set_weights(cfg.weights)
    modes = sorted(RHO_TEST_WEIGHTS)
    specs = [test_spec] + [_build_poisson({"k": float(k)}) for k in modes]
    factor = factorize_operator(base, cfg.ridge, cfg.factor_method)
    start = time.perf_counter()
    sol = apply_factor(factor, poisson_targets(base, interior, edges, specs))
    solve_time = time.perf_counter() - start
    W_test = sol.W[:, 0]
    W_sum = sum(RHO_TEST_WEIGHTS[k] * sol.W[:, 1 + i] for i, k in enumerate(modes))
    pred = interior.H @ W_test
    exact = rho_test_solution(Y, X)
    return {
        "y": Y,
        "x": X,
        "prediction": pred,
        "exact": exact,
        "solution_mse": float(np.mean((pred - exact) ** 2)),
        "mode_mse": {k: float(np.mean((interior.H @ sol.W[:, 1 + i] - poisson_solution(k)(Y, X)) ** 2)) for i, k in enumerate(modes)},
        "linearity_error": float(np.linalg.norm(W_test - W_sum) / np.linalg.norm(W_test)),
        "solve_time": solve_time,
        "path": sol.path,
        "shape": grid.shape,
    }


BEATS = {"m": 1.0, "k1": 4.5, "k2": 0.5, "domain": (0.0, 60.0), "collocation": 300}
"""Weak-coupling configuration for the energy-exchange demo (k2/k1 ~ 0.11)."""


def beats_bundles(count: int, seed: int, config: dict = BEATS) -> list:
    """Training/test samples sharing (m, k1, k2) with random initial states."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        x1, x2, v1, v2 = rng.uniform(-1.5, 1.5, size=4)
        out.append({"m": config["m"], "k1": config["k1"], "k2": config["k2"],
                    "x1": float(x1), "x2": float(x2), "v1": float(v1), "v2": float(v2)})
    return out


def beat_frequencies(m: float, k1: float, k2: float) -> tuple:
    """Normal-mode angular frequencies (in-phase, out-of-phase)."""
    return float(np.sqrt(k1 / m)), float(np.sqrt((k1 + 2 * k2) / m))


def envelope_period(t: np.ndarray, signal: np.ndarray, f_max: float, pad: int = 64) -> float:
    """Period of the dominant component below ``f_max`` (Hann window, zero-padded FFT)."""
    s = signal - signal.mean()
    n = pad * s.size
    spec = np.abs(np.fft.rfft(s * np.hanning(s.size), n))
    f = np.fft.rfftfreq(n, t[1] - t[0])
    band = (f > 0) & (f < f_max)
    return float(1.0 / f[band][np.argmax(spec[band])])


def coupled_solve(params: MlpParams, samples: Sequence[dict], t: np.ndarray, solver: SolverConfig | None = None) -> list:
    """One-shot coupled-oscillator solutions on an arbitrary grid containing t=0."""
    cfg = solver or SolverConfig()
    family = get_family("coupled_osc")
    batch = eval_hidden(params, np.asarray(t, dtype=float)[:, None], ("t", "tt"), cfg.bias_column)
    H, Htt = batch["H"], batch["H_tt"]
    out = []
    for s in samples:
        op = family.build(s)
        sol = solve_wout(assemble_coupled_ode(batch, op).set_weights(cfg.weights), "auto", cfg.ridge)
        W1, W2 = split_components(sol.W, 2)
        psi = np.column_stack([H @ W1[:, 0], H @ W2[:, 0]])
        res = np.column_stack([Htt @ W1[:, 0], Htt @ W2[:, 0]]) - psi @ op.A.T
        out.append({"sample": s, "psi": psi, "residual_mse": float(np.mean(res**2)), "path": sol.path})
    return out


def beats_experiment(params: MlpParams, n_tests: int = 100, seed: int = 7, config: dict = BEATS, dt: float = 0.01) -> dict:
    """Residuals over random ICs plus the envelope period of the pure-exchange case.

    The exchange case starts with mass 1 displaced and mass 2 at rest, so
    ``psi_1^2`` is modulated with period ``2 pi / (omega_2 - omega_1)``.
    """
    t = uniform_grid(*config["domain"], dt)
    tests = beats_bundles(n_tests, seed, config)
    exchange = {"m": config["m"], "k1": config["k1"], "k2": config["k2"], "x1": 1.0, "x2": 0.0, "v1": 0.0, "v2": 0.0}
    sols = coupled_solve(params, tests + [exchange], t)
    psi1 = sols[-1]["psi"][:, 0]
    w1, w2 = beat_frequencies(config["m"], config["k1"], config["k2"])
    analytic = 2 * np.pi / (w2 - w1)
    measured = envelope_period(t, psi1**2, f_max=w1 / (2 * np.pi))
    return {
        "t": t,
        "psi": sols[-1]["psi"],
        "residual_mse": np.array([s["residual_mse"] for s in sols[:-1]]),
        "exchange_residual_mse": sols[-1]["residual_mse"],
        "envelope_period": measured,
        "analytic_period": analytic,
        "relative_error": abs(measured - analytic) / analytic,
    }
