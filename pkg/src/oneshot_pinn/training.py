"""Bundle training of the PINN trunk with Adam."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Jet2, LossGraph, Var, grad_weights
from .network import ActivationSpec, ArchSpec, ConfigError, MlpParams, init_network, trunk_jet
from .oneshot import LinearOdeOperatorSpec, LinearPdeOperatorSpec, CoupledOdeSpec, SchrodingerSpec, _call
from .problems import NonlinearOscSpec, PdeGrid, get_family, hamiltonian, training_grid

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, lr: float, loss: float):
        self.iteration = iteration
        self.lr = lr
        super().__init__(f"loss became {loss} at iteration {iteration} (learning rate {lr})")


class UnsupportedOrderError(ValueError):
    pass


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list | None = None
        self.v: list | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class Bundle:
    """One training equation; occupies heads ``head * components ...``."""

    family: str
    params: dict
    head: int


@dataclass
class LossResult:
    loss: float
    graph: LossGraph
    terms: dict


# ---------------------------------------------------------------------------
# Model evaluation as jets
# ---------------------------------------------------------------------------


def _model_jet(model, points, request):
    """Output jet (m x q) for MlpParams (graph leaves) or a synthetic callable."""
    if isinstance(model, MlpParams):
        leaves = [Var(a) for a in model.arrays()]
        ws, bs = leaves[0::2], leaves[1::2]
        jet = trunk_jet(ws, bs, model.activation, points, request)
        return jet.linear(ws[-1], bs[-1]), leaves
    return model(np.asarray(points, dtype=np.float64), tuple(request)), []


def _component(jet: Jet2, key: str, rows=slice(None)):
    if key == "":
        comp = jet.value
    elif key in ("t", "x"):
        comp = jet.d1["tx".index(key)]
    else:
        comp = jet.second(*{"tt": (0, 0), "xt": (0, 1), "xx": (1, 1)}[key])
    if comp is None:
        return np.zeros_like(_value(jet.value)[rows])
    return comp[rows]


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _columns(x, cols):
    return x if cols is None else x[:, cols]


def _head_columns(bundles, components):
    heads = [b.head for b in bundles]
    if sorted(heads) != list(range(len(heads))):
        raise ConfigError(f"bundle heads must be distinct and contiguous from 0, got {heads}")
    cols = [b.head * components + c for b in bundles for c in range(components)]
    return None if cols == list(range(len(cols))) else np.array(cols)


def _finish(total, leaves, terms) -> LossResult:
    if not isinstance(total, Var):
        total = Var(total)
    graph = LossGraph.build(total, leaves)
    return LossResult(float(total.value), graph, {k: float(_value(v)) for k, v in terms.items()})


def _sq_mean(r):
    return (r * r).mean(axis=0).sum()


def _sq_sum(r):
    return (r * r).sum()


# ---------------------------------------------------------------------------
# Loss families
# ---------------------------------------------------------------------------


def ode_loss(model, bundles: Sequence[Bundle], grid, weights: dict | None = None, specs=None) -> LossResult:
    """Sum over bundles of mean squared residual plus squared IC mismatch.

    ``model`` is ``MlpParams`` or a callable ``(points, request) -> Jet2`` of
    the outputs (used for synthetic heads in tests).
    """
    weights = weights or {}
    specs = specs if specs is not None else [get_family(b.family).build(b.params) for b in bundles]
    kinds = {type(s) for s in specs}
    if len(kinds) != 1:
        raise ConfigError("all bundles in one loss must share a family")
    kind = kinds.pop()
    t = np.asarray(grid, dtype=np.float64).reshape(-1)
    m = t.size
    points = np.concatenate([t, [0.0]])[:, None]
    ic_row = slice(m, m + 1)
    body = slice(0, m)
    terms = {}

    if kind is LinearOdeOperatorSpec:
        orders = {s.order for s in specs}
        if len(orders) != 1:
            raise UnsupportedOrderError("bundles mix ODE orders")
        n = orders.pop()
        if n > 2:
            raise UnsupportedOrderError(f"order {n} operators are not supported")
        jet, leaves = _model_jet(model, points, ("t", "tt")[:n])
        cols = _head_columns(bundles, 1)
        derivs = [_columns(_component(jet, k), cols) for k in ("", "t", "tt")[: n + 1]]
        res = None
        for i, d in enumerate(derivs):
            coef = np.column_stack([s.coefficient_values(t)[i] for s in specs])
            term = d[body] * coef
            res = term if res is None else res + term
        res = res - np.column_stack([_call(s.force, t) for s in specs])
        ics = np.array([s.ics for s in specs]).T  # (n, q)
        ic = None
        for k in range(n):
            e = derivs[k][ic_row] - ics[k][None, :]
            ic = _sq_sum(e) if ic is None else ic + _sq_sum(e)
        terms = {"residual": _sq_mean(res), "ic": ic}

    elif kind is CoupledOdeSpec:
        s = specs[0].components
        jet, leaves = _model_jet(model, points, ("t", "tt"))
        cols = _head_columns(bundles, s)
        psi = _columns(_component(jet, ""), cols)
        psi_t = _columns(_component(jet, "t"), cols)
        psi_tt = _columns(_component(jet, "tt"), cols)
        q = len(specs)
        coupling = np.zeros((q * s, q * s))
        for b, sp_ in enumerate(specs):
            coupling[b * s : (b + 1) * s, b * s : (b + 1) * s] = sp_.A.T
        res = psi_tt[body] - psi[body] @ coupling
        psi0 = np.concatenate([sp_.psi0 for sp_ in specs])[None, :]
        dpsi0 = np.concatenate([sp_.dpsi0 for sp_ in specs])[None, :]
        terms = {"residual": _sq_mean(res), "ic": _sq_sum(psi[ic_row] - psi0) + _sq_sum(psi_t[ic_row] - dpsi0)}

    elif kind is NonlinearOscSpec:
        jet, leaves = _model_jet(model, points, ("t", "tt"))
        cols = _head_columns(bundles, 1)
        psi = _columns(_component(jet, ""), cols)
        psi_t = _columns(_component(jet, "t"), cols)
        psi_tt = _columns(_component(jet, "tt"), cols)
        p = psi[body]
        res = psi_tt[body] + p + p * p * p
        ics = np.array([sp_.ics for sp_ in specs]).T
        terms = {
            "residual": _sq_mean(res),
            "ic": _sq_sum(psi[ic_row] - ics[0][None, :]) + _sq_sum(psi_t[ic_row] - ics[1][None, :]),
            "energy": energy_term(p, psi_t[body], ics[0], ics[1]),
        }
    else:
        raise ConfigError(f"{kind.__name__} is not an ODE operator")

    total = None
    for name, val in terms.items():
        w = weights.get(name, 1.0)
        total = val * w if total is None else total + val * w
    return _finish(total, leaves, terms)


def energy_term(psi, dpsi, psi0, dpsi0):
    """Sum over heads of mean squared deviation of the oscillator energy from its initial value."""
    e0 = hamiltonian(np.asarray(psi0, dtype=float), np.asarray(dpsi0, dtype=float))
    d = hamiltonian(psi, dpsi) - np.atleast_1d(e0)[None, :]
    return _sq_mean(d)


def energy_loss(model, bundle: Bundle, grid) -> float:
    """Energy penalty of one nonlinear-oscillator head on ``grid``."""
    spec = get_family(bundle.family).build(bundle.params)
    if not isinstance(spec, NonlinearOscSpec):
        raise ConfigError("energy loss applies to the nonlinear oscillator only")
    t = np.asarray(grid, dtype=np.float64).reshape(-1, 1)
    jet, _ = _model_jet(model, t, ("t",))
    psi = _value(_component(jet, ""))[:, [bundle.head]]
    dpsi = _value(_component(jet, "t"))[:, [bundle.head]]
    return float(energy_term(psi, dpsi, [spec.psi0], [spec.dpsi0]))


def pde_loss(model, bundles: Sequence[Bundle], grid: PdeGrid, weights: dict | None = None, specs=None) -> LossResult:
    """Mean interior residual^2 + mean IC^2 + sum of mean boundary^2, summed over bundles."""
    weights = weights or {}
    specs = specs if specs is not None else [get_family(b.family).build(b.params) for b in bundles]
    kinds = {type(s) for s in specs}
    if len(kinds) != 1:
        raise ConfigError("all bundles in one loss must share a family")
    kind = kinds.pop()
    parts = [("interior", grid.interior)] + list(grid.edges.items())
    sizes = np.cumsum([0] + [p.shape[0] for _, p in parts])
    rows = {name: slice(sizes[i], sizes[i + 1]) for i, (name, _) in enumerate(parts)}
    points = np.vstack([p for _, p in parts])

    if kind is LinearPdeOperatorSpec:
        req = set().union(*(s.required() for s in specs))
        periodic = any(s.boundary_mode == "periodic" for s in specs)
        if periodic:
            req.add("x")
        jet, leaves = _model_jet(model, points, tuple(req))
        cols = _head_columns(bundles, 1)
        T, X = grid.interior[:, 0], grid.interior[:, 1]
        body = rows["interior"]
        res = None

        def add(acc, term):
            return term if acc is None else acc + term

        for key, attr, order in [("tt", "time_coeffs", 2), ("t", "time_coeffs", 1), ("xx", "space_coeffs", 2), ("x", "space_coeffs", 1)]:
            if any(order in getattr(s, attr) for s in specs):
                coef = np.column_stack([_call(getattr(s, attr).get(order), T, X) for s in specs])
                res = add(res, _columns(_component(jet, key, body), cols) * coef)
        if any(s.mixed is not None for s in specs):
            coef = np.column_stack([_call(s.mixed, T, X) for s in specs])
            res = add(res, _columns(_component(jet, "xt", body), cols) * coef)
        psi = _columns(_component(jet, ""), cols)
        if any(s.potential is not None for s in specs):
            coef = np.column_stack([_call(s.potential, T, X) for s in specs])
            res = add(res, psi[body] * coef)
        res = add(res, -np.column_stack([_call(s.source, T, X) for s in specs]))
        terms = {"residual": _sq_mean(res)}
        bc = None
        for name, pts in grid.edges.items():
            if periodic and name in ("left", "right"):
                continue
            missing = [i for i, s in enumerate(specs) if name not in s.constraints]
            if missing:
                raise ConfigError(f"boundary function for edge {name!r} missing in bundles {missing}")
            target = np.column_stack([_call(s.constraints[name], pts[:, 0], pts[:, 1]) for s in specs])
            e = psi[rows[name]] - target
            if name == "initial":
                terms["ic"] = _sq_mean(e)
            else:
                bc = add(bc, _sq_mean(e))
        if periodic:
            dx = _columns(_component(jet, "x"), cols)
            bc = add(bc, _sq_mean(psi[rows["left"]] - psi[rows["right"]]))
            bc = add(bc, _sq_mean(dx[rows["left"]] - dx[rows["right"]]))
        if bc is not None:
            terms["bc"] = bc

    elif kind is SchrodingerSpec:
        for name in ("initial", "left", "right"):
            if name not in grid.edges:
                raise ConfigError(f"Schrodinger loss needs the {name!r} edge")
        jet, leaves = _model_jet(model, points, ("t", "x", "xx"))
        cols = _head_columns(bundles, 2)
        body = rows["interior"]
        psi = _columns(_component(jet, ""), cols)
        psi_t = _columns(_component(jet, "t", body), cols)
        psi_xx = _columns(_component(jet, "xx", body), cols)
        dx = _columns(_component(jet, "x"), cols)
        q = len(specs)
        c = np.array([s.coupling for s in specs])
        # columns alternate (R, I) per bundle: swap pairs to couple R with I_xx
        swap = np.arange(2 * q).reshape(q, 2)[:, ::-1].ravel()
        sign = np.repeat(c, 2) * np.tile([1.0, -1.0], q)
        res = psi_t + psi_xx[:, swap] * sign[None, :]
        x0 = grid.edges["initial"][:, 1]
        g = np.column_stack([s.initial(x0) for s in specs])
        g_ri = np.empty((x0.size, 2 * q))
        g_ri[:, 0::2] = g.real
        g_ri[:, 1::2] = g.imag
        L, R = rows["left"], rows["right"]
        terms = {
            "residual": _sq_mean(res),
            "ic": _sq_mean(psi[rows["initial"]] - g_ri),
            "bc": _sq_mean(psi[L] - psi[R]) + _sq_mean(dx[L] - dx[R]),
        }
    else:
        raise ConfigError(f"{kind.__name__} is not a PDE operator")

    total = None
    for name, val in terms.items():
        w = weights.get(name, 1.0)
        total = val * w if total is None else total + val * w
    return _finish(total, leaves, terms)


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    family: str
    seed: int = 0
    iterations: int | None = None
    lr: float = 1e-3
    n_bundles: int | None = None
    collocation: int | None = None
    widths: tuple = (100, 100)
    activation: ActivationSpec | None = None
    bundles: list | None = None  # explicit sample dicts; default: family default or sampled
    loss_weights: dict = field(default_factory=dict)
    resample: bool = False
    log_every: int = 100
    domain: tuple | None = None

    def __post_init__(self):
        fam = get_family(self.family)
        if self.iterations is None:
            self.iterations = fam.iterations
        if self.n_bundles is None:
            self.n_bundles = len(self.bundles) if self.bundles is not None else fam.n_bundles
        if self.collocation is None:
            self.collocation = fam.collocation
        if self.activation is None:
            self.activation = fam.activation
        if isinstance(self.activation, dict):
            self.activation = ActivationSpec(**self.activation)
        self.widths = tuple(int(w) for w in self.widths)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.collocation < 2:
            raise ConfigError("collocation count must be >= 2")
        if self.n_bundles < 1:
            raise ConfigError("need at least one bundle")
        dom = self.domain or fam.domain
        if any(hi <= lo for lo, hi in dom):
            raise ConfigError(f"empty domain {dom}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.to_dict()
        d["widths"] = list(self.widths)
        return d


def sample_bundles(family, count: int, seed: int) -> list:
    """Draw ``count`` training bundles from the family's sampling sets."""
    fam = get_family(family)
    return [Bundle(fam.id, p, i) for i, p in enumerate(fam.sample(count, seed))]


def resolve_bundles(config: TrainConfig) -> list:
    fam = get_family(config.family)
    if config.bundles is not None:
        samples = [dict(b) for b in config.bundles][: config.n_bundles]
    elif fam.default_bundles is not None and config.n_bundles == len(fam.default_bundles):
        samples = [dict(b) for b in fam.default_bundles]
    else:
        return sample_bundles(fam, config.n_bundles, config.seed)
    return [Bundle(fam.id, p, i) for i, p in enumerate(samples)]


def _random_grid(fam, rng, count, domain):
    if fam.input_dim == 1:
        (lo, hi), = domain
        return np.sort(np.concatenate([[lo, hi], rng.uniform(lo, hi, count - 2)]))
    base = training_grid(fam, count, domain)
    (t0, t1), (x0, x1) = domain
    inner = np.column_stack([rng.uniform(t0, t1, base.interior.shape[0]), rng.uniform(x0, x1, base.interior.shape[0])])
    return PdeGrid(base.t, base.x, inner, base.edges)


def train_bundles(
    config: TrainConfig,
    on_log: Callable[[dict], None] | None = None,
    on_snapshot: Callable[[int, MlpParams], None] | None = None,
    snapshot_every: int = 0,
):
    """Train the multi-head trunk on one family's bundles; returns (frozen params, log rows).

    With ``on_snapshot`` and ``snapshot_every > 0`` a frozen copy of the
    network is handed over every ``snapshot_every`` iterations.
    """
    fam = get_family(config.family)
    bundles = resolve_bundles(config)
    specs = [fam.build(b.params) for b in bundles]
    domain = config.domain or fam.domain
    arch = ArchSpec(fam.input_dim, config.widths, len(bundles) * fam.components, config.activation)
    params = init_network(arch, config.seed)
    arrays = params.arrays()
    grid = training_grid(fam, config.collocation, domain)
    loss_fn = ode_loss if fam.input_dim == 1 else pde_loss
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(lr=config.lr)
    rows = []
    start = time.perf_counter()
    result = None
    for it in range(config.iterations + 1):
        g = _random_grid(fam, rng, config.collocation, domain) if config.resample else grid
        result = loss_fn(params, bundles, g, config.loss_weights, specs)
        if not np.isfinite(result.loss):
            raise TrainingDivergedError(it, config.lr, result.loss)
        if it % config.log_every == 0 or it == config.iterations:
            row = {"iteration": it, "loss": result.loss, **result.terms, "elapsed": time.perf_counter() - start}
            rows.append(row)
            if on_log is not None:
                on_log(row)
            log.debug("iter %d loss %.3e", it, result.loss)
        if it == config.iterations:
            break
        if on_snapshot is not None and snapshot_every > 0 and it > 0 and it % snapshot_every == 0:
            snap = params.freeze()
            snap.provenance = {"family": fam.id, "seed": config.seed, "iterations": it}
            on_snapshot(it, snap)
        grads = grad_weights(result.graph)
        opt.step(arrays, grads)
        result.graph.invalidate()

    params.provenance = {
        "family": fam.id,
        "seed": config.seed,
        "iterations": config.iterations,
        "collocation": config.collocation,
        "bundles": [b.params for b in bundles],
        "final_loss": rows[-1]["loss"],
        "config": config.to_dict(),
    }
    return params.freeze(), rows


def write_log_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["iteration", "loss"] + sorted({k for r in rows for k in r} - {"iteration", "loss", "elapsed"}) + ["elapsed"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in keys})
    return path


def load_train_config(path, **overrides) -> TrainConfig:
    with open(path) as fh:
        data = json.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**data)
