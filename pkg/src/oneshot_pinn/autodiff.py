"""Derivatives for PINN training.

Two layers live here:

* ``Var`` / ``LossGraph`` -- a small tape-based reverse-mode engine over numpy
  arrays, used for gradients of scalar losses w.r.t. network weights.
* ``Jet2`` -- truncated second-order Taylor jets used for exact derivatives of
  network outputs w.r.t. network *inputs* (at most two tracked input dims).

Jet components may be plain ndarrays or ``Var`` nodes; the same jet arithmetic
then either evaluates numerically or records a graph whose backward sweep gives
d/dtheta of psi, psi_t, psi_tt, ... at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GraphStateError(RuntimeError):
    """Raised when a reverse sweep is requested on a graph without a valid forward cache."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node of the reverse-mode graph.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps the upstream
    gradient of this node to the contribution for that parent.
    """

    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected ops
    __slots__ = ("value", "parents", "op", "grad", "name")

    def __init__(self, value, parents=(), op: str = "leaf", name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.value.shape})"

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        ss, os_ = self.value.shape, other.value.shape
        return Var(
            self.value + other.value,
            ((self, lambda g: _unbroadcast(g, ss)), (other, lambda g: _unbroadcast(g, os_))),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        ss, os_ = self.value.shape, other.value.shape
        return Var(
            self.value - other.value,
            ((self, lambda g: _unbroadcast(g, ss)), (other, lambda g: _unbroadcast(-g, os_))),
            "sub",
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),), "neg")

    def __mul__(self, other):
        if not isinstance(other, Var):
            c = np.asarray(other, dtype=np.float64)
            ss = self.value.shape
            return Var(self.value * c, ((self, lambda g: _unbroadcast(g * c, ss)),), "cmul")
        a, b = self.value, other.value
        return Var(
            a * b,
            (
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self * other ** -1
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        x = self.value
        return Var(x**p, ((self, lambda g: g * p * x ** (p - 1)),), "pow")

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a @ b, ((self, lambda g: g @ b.T), (other, lambda g: a.T @ g)), "matmul")

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, idx):
        shape = self.value.shape

        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx)
        )

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[idx] += g
            else:
                np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, vjp),), "getitem")

    @property
    def T(self):
        return Var(self.value.T, ((self, lambda g: g.T),), "transpose")

    def sum(self, axis=None):
        shape = self.value.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Var(self.value.sum(axis=axis), ((self, vjp),), "sum")

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x, (), "const")


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Var(y, ((x, lambda g: g * (1.0 - y * y)),), "tanh")


def sin(x):
    if not isinstance(x, Var):
        return np.sin(x)
    v = x.value
    return Var(np.sin(v), ((x, lambda g: g * np.cos(v)),), "sin")


def cos(x):
    if not isinstance(x, Var):
        return np.cos(x)
    v = x.value
    return Var(np.cos(v), ((x, lambda g: -g * np.sin(v)),), "cos")


def square(x):
    if not isinstance(x, Var):
        return x * x
    v = x.value
    return Var(v * v, ((x, lambda g: 2.0 * g * v),), "square")


def concat_rows(parts: Sequence) -> Var | np.ndarray:
    """Stack arrays/Vars along axis 0."""
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=0)
    parts = [_lift(p) for p in parts]
    sizes = np.cumsum([0] + [p.value.shape[0] for p in parts])
    parents = tuple(
        (p, (lambda g, a=sizes[i], b=sizes[i + 1]: g[a:b])) for i, p in enumerate(parts)
    )
    return Var(np.concatenate([p.value for p in parts], axis=0), parents, "concat")


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


@dataclass
class LossGraph:
    """Recorded computation of a scalar loss.

    ``nodes`` is in topological order (parents first). The graph becomes stale
    once ``invalidate`` is called, e.g. after the optimizer mutates the
    parameters the forward pass was evaluated with.
    """

    root: Var
    params: list[Var]
    nodes: list[Var] = field(default_factory=list)
    evaluated: bool = True

    @classmethod
    def build(cls, root: Var, params: Sequence[Var]) -> "LossGraph":
        if root.value.size != 1:
            raise ValueError(f"loss root must be scalar, got shape {root.value.shape}")
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(root=root, params=list(params), nodes=order)

    @property
    def loss(self) -> float:
        return float(self.root.value)

    def invalidate(self) -> None:
        self.evaluated = False


def grad_weights(graph: LossGraph) -> list[np.ndarray]:
    """Reverse sweep: d loss / d param for every parameter leaf of ``graph``.

    Parameters that the loss does not depend on receive exact zeros.
    """
    if not graph.evaluated:
        raise GraphStateError("forward cache is stale or unevaluated; rebuild the loss graph")
    grads: dict[int, np.ndarray] = {id(graph.root): np.ones_like(graph.root.value)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [
        np.asarray(grads[id(p)], dtype=np.float64).reshape(p.value.shape)
        if id(p) in grads
        else np.zeros_like(p.value)
        for p in graph.params
    ]


# ---------------------------------------------------------------------------
# Forward-mode jets
# ---------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "sin", "blend")


@dataclass
class Jet2:
    """Second-order jet over at most two tracked input dims.

    ``d1[k]`` is the partial along tracked dim ``k``. ``d2`` stores each
    second partial once under the key ``(i, j)`` with ``i <= j``. A ``None``
    component means "identically zero" and is skipped in arithmetic.
    """

    value: object
    d1: tuple = ()
    d2: dict = field(default_factory=dict)

    def second(self, i: int, j: int):
        return self.d2.get((min(i, j), max(i, j)))

    def linear(self, weight, bias=None) -> "Jet2":
        """Apply ``x @ weight (+ bias)``; derivatives transform without the bias."""
        val = self.value @ weight
        if bias is not None:
            val = val + bias
        return Jet2(
            val,
            tuple(None if d is None else d @ weight for d in self.d1),
            {k: (None if d is None else d @ weight) for k, d in self.d2.items()},
        )

    def __add__(self, other: "Jet2") -> "Jet2":
        return Jet2(
            self.value + other.value,
            tuple(_add_opt(a, b) for a, b in zip(self.d1, other.d1)),
            {k: _add_opt(self.d2.get(k), other.d2.get(k)) for k in set(self.d2) | set(other.d2)},
        )

    def __mul__(self, other: "Jet2") -> "Jet2":
        u, v = self, other
        d1 = tuple(
            _add_opt(_mul_opt(a, v.value), _mul_opt(u.value, b)) for a, b in zip(u.d1, v.d1)
        )
        d2 = {}
        for (i, j) in set(u.d2) | set(v.d2):
            term = _add_opt(_mul_opt(u.d2.get((i, j)), v.value), _mul_opt(u.value, v.d2.get((i, j))))
            term = _add_opt(term, _mul_opt(u.d1[i], v.d1[j]))
            term = _add_opt(term, _mul_opt(u.d1[j], v.d1[i]))
            d2[(i, j)] = term
        return Jet2(u.value * v.value, d1, d2)


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _mul_opt(a, b):
    if a is None or b is None:
        return None
    return a * b


def activation_derivs(kind: str, alpha: float, z):
    """Return (sigma, sigma', sigma'') evaluated at ``z`` (ndarray or Var)."""
    if kind == "tanh":
        s = tanh(z)
        s1 = 1.0 - s * s
        return s, s1, -2.0 * s * s1
    if kind == "sin":
        s = sin(z)
        return s, cos(z), -s
    if kind == "blend":
        th = tanh(z)
        sn = sin(z)
        th1 = 1.0 - th * th
        s = alpha * sn + (1.0 - alpha) * th
        s1 = alpha * cos(z) + (1.0 - alpha) * th1
        s2 = -alpha * sn + (-2.0 * (1.0 - alpha)) * (th * th1)
        return s, s1, s2
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def jet_apply(activation, jet: Jet2) -> Jet2:
    """Push ``jet`` through an elementwise activation by the second-order chain rule.

    ``activation`` is anything with ``kind`` and ``alpha`` attributes (see
    ``network.ActivationSpec``).
    """
    s, s1, s2 = activation_derivs(activation.kind, activation.alpha, jet.value)
    d1 = tuple(_mul_opt(s1, d) for d in jet.d1)
    d2 = {}
    for (i, j), dij in _needed_pairs(jet):
        term = _mul_opt(s2, _mul_opt(jet.d1[i], jet.d1[j]))
        d2[(i, j)] = _add_opt(term, _mul_opt(s1, dij))
    return Jet2(s, d1, d2)


def _needed_pairs(jet: Jet2):
    return [(k, jet.d2.get(k)) for k in sorted(jet.d2)]


def finite_difference(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """Central difference of ``fn`` along each coordinate of ``x`` (test helper)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        out.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(out)
