"""Closed-form output weights on a frozen hidden basis.

Every linear problem is reduced to a stack of weighted blocks ``A_b W = Y_b``;
the loss at ``W`` is ``sum_b w_b ||A_b W - Y_b||^2`` and its minimizer is the
one-shot W_out. Three routes compute it: (ridge-)regularized normal equations,
pivoted QR of the stacked matrix, and a cached Cholesky factor of the Gram
matrix that is reused across right-hand sides.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from .autodiff import Var, grad_weights, LossGraph
from .network import JetBatch

CONDITION_THRESHOLD = 1e12
"""Gram-matrix condition number above which the normal equations are refused / QR is routed."""

AUTO_RIDGE_SCALE = 1e-10
"""``ridge='auto'`` on the normal path means ``AUTO_RIDGE_SCALE * trace(Gram) / n_columns``."""
QR_RIDGE_SCALE = 1e-16
"""Same for the augmented-QR path, which tolerates a much smaller shift."""


class IllConditionedError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(
            f"Gram matrix is numerically singular (condition {condition:.3e} > "
            f"{CONDITION_THRESHOLD:.0e}); use the QR path or a ridge lambda > 0"
        )


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank: int, columns: int):
        self.rank = rank
        self.columns = columns
        super().__init__(f"stacked system is rank deficient: numerical rank {rank} < {columns} columns")


class ProvenanceError(ValueError):
    """A cached factor was applied to targets built on a different basis/grid."""


class AssemblyError(ValueError):
    pass


def _call(fn, *args):
    """Evaluate a coefficient (constant, array sampled on the grid, or callable), broadcast to args."""
    shape = np.broadcast(*args).shape
    if fn is None:
        return np.zeros(shape)
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(*args), dtype=np.float64), shape)
    if np.ndim(fn):
        return np.broadcast_to(np.asarray(fn, dtype=np.float64), shape)
    return np.full(shape, float(fn))


# ---------------------------------------------------------------------------
# Operator specifications
# ---------------------------------------------------------------------------


@dataclass
class LinearOdeOperatorSpec:
    """``sum_i a_i(t) psi^(i) = f(t)`` with ICs ``[psi(0), psi'(0), ...]``."""

    coefficients: Sequence  # a_0 .. a_n; callables of t or constants
    force: object
    ics: Sequence[float]

    def __post_init__(self):
        self.ics = np.atleast_1d(np.asarray(self.ics, dtype=np.float64))
        if self.order not in (1, 2):
            raise AssemblyError(f"unsupported ODE order {self.order}; only 1 and 2 are handled")
        if self.ics.size != self.order:
            raise AssemblyError(f"order-{self.order} ODE needs {self.order} initial values, got {self.ics.size}")

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    def coefficient_values(self, t) -> list:
        return [_call(a, t) for a in self.coefficients]

    def apply(self, derivs: Sequence[np.ndarray], t) -> np.ndarray:
        """``D psi`` given ``derivs = [psi, psi', ...]`` on ``t``."""
        return sum(a * d for a, d in zip(self.coefficient_values(t), derivs))


@dataclass
class CoupledOdeSpec:
    """Second-order system ``psi'' = A psi`` with ICs per component."""

    A: np.ndarray
    psi0: Sequence[float]
    dpsi0: Sequence[float]

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.psi0 = np.asarray(self.psi0, dtype=np.float64)
        self.dpsi0 = np.asarray(self.dpsi0, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise AssemblyError(f"coupling matrix must be square, got {self.A.shape}")
        if self.psi0.shape != (self.A.shape[0],) or self.dpsi0.shape != (self.A.shape[0],):
            raise AssemblyError("initial conditions must have one entry per component")

    @property
    def components(self) -> int:
        return self.A.shape[0]


@dataclass
class LinearPdeOperatorSpec:
    """``(D^t + D^x + D^xt + V) psi = f`` on inputs (t, x).

    ``time_coeffs``/``space_coeffs`` map derivative order (1 or 2) to
    coefficient functions of (t, x). ``constraints`` maps an edge name
    (``initial``, ``final``, ``left``, ``right``) to the Dirichlet target
    function of (t, x). With ``boundary_mode='periodic'`` the ``left``/``right``
    entries are ignored and value + x-derivative differences are driven to zero.
    """

    time_coeffs: Mapping = field(default_factory=dict)
    space_coeffs: Mapping = field(default_factory=dict)
    mixed: object = None
    potential: object = None
    source: object = 0.0
    constraints: Mapping = field(default_factory=dict)
    boundary_mode: str = "dirichlet"

    def __post_init__(self):
        if self.boundary_mode not in ("dirichlet", "periodic"):
            raise AssemblyError(f"unknown boundary mode {self.boundary_mode!r}")
        for k in list(self.time_coeffs) + list(self.space_coeffs):
            if k not in (1, 2):
                raise AssemblyError(f"derivative order {k} not supported")

    def required(self) -> set:
        req = {("t" * k) for k in self.time_coeffs} | {("x" * k) for k in self.space_coeffs}
        if self.mixed is not None:
            req.add("xt")
        return req


@dataclass
class SchrodingerSpec:
    """Free-particle wave packet: real/imag split of ``i hbar psi_t = -(hbar^2/2m) psi_xx``."""

    sigma: float
    p0: float
    x0: float = 0.0
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise AssemblyError("sigma must be positive")

    @property
    def coupling(self) -> float:
        return self.hbar / (2.0 * self.mass)

    def initial(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        env = np.exp(-((x - self.x0) ** 2) / (2 * self.sigma**2)) / (np.pi**0.25 * np.sqrt(self.sigma))
        return env * np.exp(1j * self.p0 * x / self.hbar)


# ---------------------------------------------------------------------------
# Assembled systems
# ---------------------------------------------------------------------------


@dataclass
class Block:
    name: str
    matrix: np.ndarray
    target: np.ndarray | None  # rows x n_rhs
    weight: float = 1.0


@dataclass
class AssembledSystem:
    """Stacked least-squares blocks sharing one column space.

    ``components`` is the number of coupled outputs (columns = components * width).
    """

    blocks: list
    components: int = 1
    provenance: str = ""

    def __post_init__(self):
        cols = {b.matrix.shape[1] for b in self.blocks}
        if len(cols) != 1:
            raise AssemblyError(f"blocks disagree on column count: {cols}")
        for b in self.blocks:
            if b.target is not None:
                if b.target.ndim == 1:
                    b.target = b.target[:, None]
                if b.target.shape[0] != b.matrix.shape[0]:
                    raise AssemblyError(f"block {b.name}: {b.matrix.shape[0]} rows vs {b.target.shape[0]} targets")

    @property
    def n_columns(self) -> int:
        return self.blocks[0].matrix.shape[1]

    @property
    def n_rows(self) -> int:
        return sum(b.matrix.shape[0] for b in self.blocks)

    @property
    def n_rhs(self) -> int:
        return self.blocks[0].target.shape[1]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def stacked(self, with_targets: bool = True):
        A = np.vstack([np.sqrt(b.weight) * b.matrix for b in self.blocks])
        if not with_targets:
            return A
        Y = np.vstack([np.sqrt(b.weight) * b.target for b in self.blocks])
        return A, Y

    def gram(self) -> np.ndarray:
        return sum(b.weight * (b.matrix.T @ b.matrix) for b in self.blocks)

    def rhs(self, targets: Mapping | None = None) -> np.ndarray:
        out = 0.0
        for b in self.blocks:
            y = b.target if targets is None else _as_2d(targets[b.name])
            out = out + b.weight * (b.matrix.T @ y)
        return out

    def loss(self, W: np.ndarray, targets: Mapping | None = None) -> np.ndarray:
        """Per-right-hand-side loss ``sum_b w_b ||A_b W - Y_b||^2``."""
        W = _as_2d(W)
        total = 0.0
        for b in self.blocks:
            y = b.target if targets is None else _as_2d(targets[b.name])
            r = b.matrix @ W - y
            total = total + b.weight * np.sum(r * r, axis=0)
        return np.atleast_1d(total)

    def with_targets(self, targets: Mapping) -> "AssembledSystem":
        return AssembledSystem(
            [Block(b.name, b.matrix, _as_2d(targets[b.name]), b.weight) for b in self.blocks],
            self.components,
            self.provenance,
        )

    def set_weights(self, weights: Mapping) -> "AssembledSystem":
        for b in self.blocks:
            if b.name in weights:
                b.weight = float(weights[b.name])
        return self


def _as_2d(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y


def _t_of(batch: JetBatch) -> np.ndarray:
    return batch.points[:, 0]


def _initial_rows(batch: JetBatch, initial: JetBatch | None, keys):
    if initial is not None:
        return [initial[k][:1] for k in keys]
    zero = np.flatnonzero(_t_of(batch) == 0.0)
    if zero.size == 0:
        raise AssemblyError("grid has no t=0 row; pass a dedicated initial batch")
    return [batch[k][zero[:1]] for k in keys]


_DERIV_KEYS = ("H", "H_t", "H_tt")


def assemble_ode(batch: JetBatch, op: LinearOdeOperatorSpec, initial: JetBatch | None = None) -> AssembledSystem:
    """Residual block ``sum_i a_i(t) H^(i)`` plus IC rows ``[H(0); H_t(0); ...]``.

    Default weights mirror the training loss: mean over residual rows, plain
    sum over the IC rows.
    """
    keys = _DERIV_KEYS[: op.order + 1]
    for k in keys:
        if k not in batch:
            raise AssemblyError(f"JetBatch lacks {k} needed for an order-{op.order} operator")
    t = _t_of(batch)
    D = sum(a[:, None] * batch[k] for a, k in zip(op.coefficient_values(t), keys))
    f = _call(op.force, t)
    ic_rows = _initial_rows(batch, initial, keys[:-1])
    blocks = [Block("residual", D, f, 1.0 / t.size)]
    blocks.append(Block("ic", np.vstack(ic_rows), op.ics.copy()))
    return AssembledSystem(blocks, 1, batch.provenance)


def ode_targets(batch: JetBatch, ops: Sequence[LinearOdeOperatorSpec]) -> dict:
    """Stacked right-hand sides for many ODEs sharing one operator."""
    t = _t_of(batch)
    return {
        "residual": np.column_stack([_call(op.force, t) for op in ops]) if ops else np.zeros((t.size, 0)),
        "ic": np.column_stack([op.ics for op in ops]) if ops else np.zeros((0, 0)),
    }


def assemble_coupled_ode(batch: JetBatch, op: CoupledOdeSpec, initial: JetBatch | None = None) -> AssembledSystem:
    """Block system for ``psi'' = A psi``; columns are ``[W_1; W_2; ...]``."""
    if "H_tt" not in batch:
        raise AssemblyError("coupled second-order system needs H_tt")
    s = op.components
    H, Htt = batch["H"], batch["H_tt"]
    rows = []
    for i in range(s):
        rows.append(np.hstack([(Htt if i == j else 0.0) - op.A[i, j] * H for j in range(s)]))
    D = np.vstack(rows)
    H0, Ht0 = _initial_rows(batch, initial, ("H", "H_t"))
    eye = np.eye(s)
    return AssembledSystem(
        [
            Block("residual", D, np.zeros(D.shape[0]), 1.0 / H.shape[0]),
            Block("ic", np.kron(eye, H0), op.psi0.copy()),
            Block("ic_velocity", np.kron(eye, Ht0), op.dpsi0.copy()),
        ],
        s,
        batch.provenance,
    )


def assemble_pde(
    interior: JetBatch, op: LinearPdeOperatorSpec, edges: Mapping[str, JetBatch] | None = None
) -> AssembledSystem:
    """Residual ``(D^t + D^x + D^xt + V) H`` plus one constraint block per edge.

    Every block is weighted by 1/rows, i.e. the loss is a sum of per-block means.
    """
    edges = dict(edges or {})
    t, x = interior.points[:, 0], interior.points[:, 1]
    D = np.zeros(interior.shape)
    for order, coeff in op.time_coeffs.items():
        D = D + _call(coeff, t, x)[:, None] * interior["H_" + "t" * order]
    for order, coeff in op.space_coeffs.items():
        D = D + _call(coeff, t, x)[:, None] * interior["H_" + "x" * order]
    if op.mixed is not None:
        D = D + _call(op.mixed, t, x)[:, None] * interior["H_xt"]
    if op.potential is not None:
        D = D + _call(op.potential, t, x)[:, None] * interior["H"]
    blocks = [Block("residual", D, _call(op.source, t, x), 1.0 / t.size)]

    for name, target in op.constraints.items():
        if op.boundary_mode == "periodic" and name in ("left", "right"):
            continue
        if name not in edges:
            raise AssemblyError(f"constraint {name!r} has no boundary batch")
        eb = edges[name]
        blocks.append(Block(name, eb["H"], _call(target, eb.points[:, 0], eb.points[:, 1]), 1.0 / eb.shape[0]))
    if op.boundary_mode == "periodic":
        blocks.extend(_periodic_blocks(edges))
    return AssembledSystem(blocks, 1, interior.provenance)


def _periodic_blocks(edges) -> list:
    try:
        left, right = edges["left"], edges["right"]
    except KeyError:
        raise AssemblyError("periodic boundaries need 'left' and 'right' edge batches") from None
    if "H_x" not in left or "H_x" not in right:
        raise AssemblyError("periodic boundaries need H_x on both edges")
    Hd = left["H"] - right["H"]
    Hdx = left["H_x"] - right["H_x"]
    w = 1.0 / Hd.shape[0]
    return [Block("periodic", Hd, np.zeros(Hd.shape[0]), w), Block("periodic_x", Hdx, np.zeros(Hdx.shape[0]), w)]


def assemble_schrodinger(
    interior: JetBatch, op: SchrodingerSpec, initial: JetBatch, edges: Mapping[str, JetBatch]
) -> AssembledSystem:
    """Real/imaginary block system; columns are ``[W_R; W_I]``."""
    for k in ("H_t", "H_xx"):
        if k not in interior:
            raise AssemblyError(f"interior batch lacks {k}")
    c = op.coupling
    Ht, Hxx = interior["H_t"], interior["H_xx"]
    D = np.vstack([np.hstack([Ht, c * Hxx]), np.hstack([-c * Hxx, Ht])])
    g = op.initial(initial.points[:, 1])
    eye = np.eye(2)
    per = _periodic_blocks(edges)
    blocks = [
        Block("residual", D, np.zeros(D.shape[0]), 1.0 / Ht.shape[0]),
        Block("ic", np.kron(eye, initial["H"]), np.concatenate([g.real, g.imag]), 1.0 / initial.shape[0]),
    ]
    for b in per:
        blocks.append(Block(b.name, np.kron(eye, b.matrix), np.zeros(2 * b.matrix.shape[0]), b.weight))
    return AssembledSystem(blocks, 2, interior.provenance)


def schrodinger_targets(system: AssembledSystem, initial: JetBatch, ops: Sequence[SchrodingerSpec]) -> dict:
    x = initial.points[:, 1]
    gs = [op.initial(x) for op in ops]
    out = {b.name: np.zeros((b.matrix.shape[0], len(ops))) for b in system.blocks}
    out["ic"] = np.column_stack([np.concatenate([g.real, g.imag]) for g in gs]) if ops else out["ic"]
    return out


def split_components(W: np.ndarray, components: int) -> list:
    W = _as_2d(W)
    n = W.shape[0] // components
    return [W[i * n : (i + 1) * n] for i in range(components)]


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


@dataclass
class OneShotSolution:
    W: np.ndarray
    path: str
    ridge: float
    condition: float
    loss: np.ndarray
    wall_time: float
    rank: int | None = None

    def report(self) -> dict:
        return {
            "path": self.path,
            "ridge": self.ridge,
            "condition": self.condition,
            "rank": self.rank,
            "loss": [float(v) for v in np.atleast_1d(self.loss)],
            "wall_time": self.wall_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.report())


def _resolve_ridge(ridge, G, scale: float = AUTO_RIDGE_SCALE) -> float:
    """``"auto"`` scales with the mean Gram diagonal of ``G``."""
    if ridge == "auto":
        return scale * float(np.trace(G)) / G.shape[0]
    ridge = float(ridge)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    return ridge


def gram_condition(G: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(G)
    lo = ev[0]
    if lo <= 0:
        return float("inf")
    return float(ev[-1] / lo)


def _cholesky(Gr: np.ndarray, cond: float):
    try:
        return sla.cho_factor(Gr)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError(cond) from exc


def solve_wout_normal(system: AssembledSystem, ridge=0.0, max_condition: float = CONDITION_THRESHOLD) -> OneShotSolution:
    """``W = (sum w A^T A + lambda I)^-1 sum w A^T Y`` via Cholesky."""
    start = time.perf_counter()
    G = system.gram()
    lam = _resolve_ridge(ridge, G)
    Gr = G + lam * np.eye(G.shape[0])
    cond = gram_condition(Gr)
    if lam == 0.0 and not cond <= max_condition:
        raise IllConditionedError(cond)
    W = sla.cho_solve(_cholesky(Gr, cond), system.rhs())
    elapsed = time.perf_counter() - start
    path = "normal" if lam == 0.0 else "normal+ridge"
    return OneShotSolution(W, path, lam, cond, system.loss(W), elapsed)


def qr_rank(R: np.ndarray, shape) -> int:
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return 0
    tol = max(shape) * np.finfo(np.float64).eps * d[0]
    return int(np.sum(d > tol))


def _qr_factor(A: np.ndarray, lam: float = 0.0):
    """Pivoted QR of ``A`` (or of ``[A; sqrt(lam) I]``); Q is cut to A's rows."""
    m, n = A.shape
    if lam > 0.0:
        A = np.vstack([A, np.sqrt(lam) * np.eye(n)])
    elif m < n:
        raise AssemblyError(f"QR path needs at least as many rows as columns, got {(m, n)}")
    Q, R, perm = sla.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    cond = float((d[0] / d[-1]) ** 2) if d[-1] > 0 else float("inf")  # Gram-condition estimate
    return Q[:m], R, perm, qr_rank(R, A.shape), cond


def _qr_apply(Q, R, perm, Y):
    Z = sla.solve_triangular(R, Q.T @ Y)
    W = np.empty_like(Z)
    W[perm] = Z
    return W


def solve_wout_qr(system: AssembledSystem, ridge=0.0) -> OneShotSolution:
    """Least squares through pivoted QR of the stacked matrix; never forms A^T A.

    With ``ridge > 0`` (or ``"auto"``) the Tikhonov term enters as extra rows
    ``sqrt(ridge) I``, so rank-deficient bases stay solvable.
    """
    start = time.perf_counter()
    A, Y = system.stacked()
    lam = _resolve_ridge(ridge, A.T @ A, QR_RIDGE_SCALE)
    Q, R, perm, rank, cond = _qr_factor(A, lam)
    if rank < A.shape[1]:
        raise RankDeficientError(rank, A.shape[1])
    W = _qr_apply(Q, R, perm, Y)
    elapsed = time.perf_counter() - start
    path = "qr" if lam == 0.0 else "qr+ridge"
    return OneShotSolution(W, path, lam, cond, system.loss(W), elapsed, rank)


def solve_wout(system: AssembledSystem, path: str = "qr", ridge="auto") -> OneShotSolution:
    """Dispatch to a solver path: ``qr``, ``normal`` (uses ``ridge``) or ``auto``.

    ``auto`` tries plain QR and falls back to ridge-augmented QR when the
    stacked matrix is numerically rank deficient.
    """
    if path == "qr":
        return solve_wout_qr(system)
    if path == "normal":
        return solve_wout_normal(system, ridge)
    if path == "auto":
        try:
            return solve_wout_qr(system)
        except (RankDeficientError, AssemblyError):
            return solve_wout_qr(system, "auto" if ridge in (0, 0.0) else ridge)
    raise ValueError(f"unknown solver path {path!r}")


@dataclass
class OperatorFactor:
    """Reusable factorization of a fixed operator's least-squares system.

    ``method='normal'`` caches the Cholesky factor of the (ridged) Gram matrix;
    ``method='qr'`` caches the pivoted QR factors of the stacked matrix.
    """

    method: str
    factors: tuple
    blocks: list  # normal: (name, weight, A_b^T); qr: (name, sqrt(weight), rows)
    ridge: float
    condition: float
    provenance: str
    components: int = 1


def factorize_operator(system: AssembledSystem, ridge="auto", method: str = "normal") -> OperatorFactor:
    """Factor the target-independent part of ``system`` once."""
    if method == "qr":
        A = system.stacked(with_targets=False)
        Q, R, perm, rank, cond = _qr_factor(A) if A.shape[0] >= A.shape[1] else (None,) * 5
        lam = 0.0
        if Q is None or rank < A.shape[1]:
            lam = _resolve_ridge(ridge, A.T @ A, QR_RIDGE_SCALE)
            if lam == 0.0:
                raise RankDeficientError(rank or 0, A.shape[1])
            Q, R, perm, rank, cond = _qr_factor(A, lam)
        blocks = [(b.name, np.sqrt(b.weight), b.matrix.shape[0]) for b in system.blocks]
        return OperatorFactor("qr", (Q, R, perm), blocks, lam, cond, system.provenance, system.components)
    if method != "normal":
        raise ValueError(f"unknown factor method {method!r}")
    G = system.gram()
    lam = _resolve_ridge(ridge, G)
    Gr = G + lam * np.eye(G.shape[0])
    cond = gram_condition(Gr)
    if lam == 0.0 and not cond <= CONDITION_THRESHOLD:
        raise IllConditionedError(cond)
    cho = _cholesky(Gr, cond)
    # same arithmetic as AssembledSystem.rhs, so reuse reproduces solve_wout_normal
    blocks = [(b.name, b.weight, b.matrix.T) for b in system.blocks]
    return OperatorFactor("normal", (cho,), blocks, lam, cond, system.provenance, system.components)


def apply_factor(factor: OperatorFactor, targets, provenance: str | None = None) -> OneShotSolution:
    """Solve for many right-hand sides with a cached factor.

    ``targets`` maps block name to a (rows x k) array, or is an
    ``AssembledSystem`` carrying targets (its provenance is then checked).
    """
    start = time.perf_counter()
    system = None
    if isinstance(targets, AssembledSystem):
        system = targets
        provenance = targets.provenance
        targets = {b.name: b.target for b in targets.blocks}
    if provenance is not None and provenance != factor.provenance:
        raise ProvenanceError(f"factor built on {factor.provenance!r}, targets on {provenance!r}")
    if factor.method == "qr":
        Q, R, perm = factor.factors
        Y = np.vstack([s * _as_2d(targets[name]) for name, s, _ in factor.blocks])
        W = _qr_apply(Q, R, perm, Y)
        path = "qr" if factor.ridge == 0.0 else "qr+ridge"
    else:
        rhs = 0.0
        for name, w, AT in factor.blocks:
            rhs = rhs + w * (AT @ _as_2d(targets[name]))
        W = sla.cho_solve(factor.factors[0], rhs)
        path = "normal" if factor.ridge == 0.0 else "normal+ridge"
    elapsed = time.perf_counter() - start
    loss = system.loss(W) if system is not None else np.full(W.shape[1], np.nan)
    return OneShotSolution(W, path, factor.ridge, factor.condition, loss, elapsed)


def condition_report(system: AssembledSystem, threshold: float = CONDITION_THRESHOLD) -> dict:
    """Conditioning diagnostics and the recommended solver path."""
    A = system.stacked(with_targets=False)
    s = np.linalg.svd(A, compute_uv=False)
    tol = max(A.shape) * np.finfo(np.float64).eps * s[0] if s.size else 0.0
    rank = int(np.sum(s > tol))
    cond_A = float(s[0] / s[-1]) if s.size and s[-1] > 0 else float("inf")
    cond_gram = cond_A**2
    if rank < A.shape[1]:
        path = "qr+ridge"
    elif cond_gram > threshold:
        path = "qr"
    else:
        path = "normal"
    G_trace = float(np.sum(s**2))
    return {
        "rows": int(A.shape[0]),
        "columns": int(A.shape[1]),
        "condition": cond_gram,
        "condition_design": cond_A,
        "rank": rank,
        "path": path,
        "suggested_ridge": AUTO_RIDGE_SCALE * G_trace / A.shape[1],
        "threshold": threshold,
    }


# ---------------------------------------------------------------------------
# Gradient fine-tuning of W_out (nonlinear residuals)
# ---------------------------------------------------------------------------


class FinetuneDivergedError(FloatingPointError):
    def __init__(self, epoch: int, history: list):
        self.epoch = epoch
        self.history = history
        super().__init__(f"fine-tuning loss became non-finite at epoch {epoch}")


@dataclass
class FinetuneResult:
    W: np.ndarray
    history: list
    loss: np.ndarray  # per column at the final W


def finetune_wout_gd(
    batch: JetBatch,
    residual_fn: Callable,
    ics: np.ndarray,
    epochs: int = 5000,
    lr: float = 1e-3,
    *,
    initial: JetBatch | None = None,
    extra_loss: Callable | None = None,
    W0: np.ndarray | None = None,
    residual_weight: float = 1.0,
    ic_weight: float = 1.0,
    record_every: int = 100,
) -> FinetuneResult:
    """Optimize W_out by Adam on the frozen basis; the trunk is never touched.

    ``residual_fn(psi, psi_t, psi_tt, t)`` returns the (m x k) residual for k
    simultaneous equations. ``ics`` is (n_ic x k) with rows [psi(0), psi'(0)].
    ``extra_loss(psi, psi_t, ics)`` may add a per-column penalty (summed).
    The loss matches ``AssembledSystem.loss``: weighted sums of squares.
    The lowest-loss iterate is returned, so the result never scores worse
    than ``W0``.
    """
    from .training import Adam

    ics = _as_2d(ics)
    k = ics.shape[1]
    n_ic = ics.shape[0]
    H = batch["H"]
    Ht = batch["H_t"] if "H_t" in batch else None
    Htt = batch["H_tt"] if "H_tt" in batch else None
    ic_rows = _initial_rows(batch, initial, ("H", "H_t")[:n_ic])
    t = _t_of(batch)[:, None]
    W = np.zeros((H.shape[1], k)) if W0 is None else np.array(_as_2d(W0), dtype=np.float64)
    opt = Adam(lr=lr)
    history = []
    best = (np.inf, W.copy(), None)

    def build(Wv):
        psi = H @ Wv
        psi_t = Ht @ Wv if Ht is not None else None
        psi_tt = Htt @ Wv if Htt is not None else None
        r = residual_fn(psi, psi_t, psi_tt, t)
        loss_cols = residual_weight * (r * r).sum(axis=0)
        for row, target in zip(ic_rows, ics):
            e = row @ Wv - target[None, :]
            loss_cols = loss_cols + ic_weight * (e * e).sum(axis=0)
        if extra_loss is not None:
            loss_cols = loss_cols + extra_loss(psi, psi_t, ics)
        return loss_cols

    for epoch in range(epochs + 1):
        Wv = Var(W)
        cols = build(Wv)
        total = cols.sum()
        lval = float(total.value)
        if not np.isfinite(lval):
            raise FinetuneDivergedError(epoch, history)
        if lval < best[0]:
            best = (lval, W.copy(), np.array(cols.value))
        if epoch % record_every == 0 or epoch == epochs:
            history.append((epoch, lval))
        if epoch == epochs:
            break
        (g,) = grad_weights(LossGraph.build(total, [Wv]))
        opt.step([W], [g])
    return FinetuneResult(best[1], history, best[2])


def finetune_system_gd(
    system: AssembledSystem, epochs: int = 5000, lr: float = 1e-3, W0: np.ndarray | None = None, record_every: int = 100
) -> FinetuneResult:
    """Adam on ``system.loss`` for every right-hand side at once.

    The gradient ``2 sum_b w_b A_b^T (A_b W - Y_b)`` is formed directly, so
    this works for any assembled family (PDE and coupled systems included).
    """
    from .training import Adam

    # loss(W) = W^T G W - 2 W^T r + c per column, so each epoch costs O(h^2)
    G = system.gram()
    R = system.rhs()
    c = sum(b.weight * np.sum(b.target * b.target, axis=0) for b in system.blocks)
    W = np.zeros((system.n_columns, system.n_rhs)) if W0 is None else np.array(_as_2d(W0), dtype=np.float64)
    opt = Adam(lr=lr)
    history = []
    best_loss = np.full(system.n_rhs, np.inf)
    best_W = W.copy()
    for epoch in range(epochs + 1):
        GW = G @ W
        cols = np.sum(W * GW, axis=0) - 2.0 * np.sum(W * R, axis=0) + c
        if not np.all(np.isfinite(cols)):
            raise FinetuneDivergedError(epoch, history)
        better = cols < best_loss
        best_loss[better] = cols[better]
        best_W[:, better] = W[:, better]
        if epoch % record_every == 0 or epoch == epochs:
            history.append((epoch, float(cols.sum())))
        if epoch == epochs:
            break
        opt.step([W], [2.0 * (GW - R)])
    return FinetuneResult(best_W, history, system.loss(best_W))


# ---------------------------------------------------------------------------
# Cost of many right-hand sides with a cached factor
# ---------------------------------------------------------------------------


def rhs_scaling(
    factor: OperatorFactor, block_rows: Mapping[str, int], counts=(100, 1000, 10000), repeats: int = 5, seed: int = 0
) -> dict:
    """Time ``apply_factor`` for growing numbers of right-hand sides.

    The factorization is done once by the caller; each count is timed
    ``repeats`` times and the median kept. Fits ``t = c0 + c1 * m``.
    """
    rng = np.random.default_rng(seed)
    times = []
    for m in counts:
        targets = {name: rng.standard_normal((rows, m)) for name, rows in block_rows.items()}
        apply_factor(factor, targets)  # warm-up
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            apply_factor(factor, targets)
            samples.append(time.perf_counter() - start)
        times.append(float(np.median(samples)))
    m = np.asarray(counts, dtype=float)
    y = np.asarray(times)
    c1, c0 = np.polyfit(m, y, 1)
    fit = c0 + c1 * m
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"counts": list(counts), "times": times, "c0": float(c0), "c1": float(c1), "r2": r2}
