"""Multi-head MLP trunk, hidden-state extraction and checkpoints.

Checkpoint layout (``.npz``, schema version 1):

* ``meta`` -- a 0-d unicode array holding JSON with keys ``schema_version``,
  ``input_dim``, ``widths``, ``heads``, ``activation`` ({kind, alpha}),
  ``seed``, ``frozen``, ``provenance`` (free-form dict written by the trainer).
* ``W0, b0, W1, b1, ...`` -- layer weights/biases as little-endian float64
  (``<f8``). ``W_i`` has shape (fan_in, fan_out); the last pair is the output
  head (h x q plus bias).
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ACTIVATIONS, Jet2, Var, jet_apply

SCHEMA_VERSION = 1

DERIVATIVES = ("t", "tt", "x", "xx", "xt")
_AXES = {"t": 0, "x": 1}


class ConfigError(ValueError):
    """Invalid architecture / configuration."""


class CheckpointError(ValueError):
    """A checkpoint could not be loaded."""


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "tanh"
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"blend alpha must lie in [0, 1], got {self.alpha}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha}


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int = 1
    widths: tuple = (100, 100)
    heads: int = 1
    activation: ActivationSpec = ActivationSpec()

    def __post_init__(self):
        if self.input_dim not in (1, 2):
            raise ConfigError("input_dim must be 1 or 2")
        if not self.widths or any(int(w) < 1 for w in self.widths) or self.heads < 1:
            raise ConfigError(f"layer widths and head count must be >= 1: {self.widths}, {self.heads}")


@dataclass
class MlpParams:
    """Trunk layers plus a linear output head.

    ``weights[i]`` has shape (fan_in, fan_out); the last layer is the head.
    Input columns are ordered (t,) or (t, x).
    """

    weights: list
    biases: list
    activation: ActivationSpec
    input_dim: int
    seed: int | None = None
    frozen: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_shapes(self.weights, self.biases, self.input_dim)

    @property
    def widths(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def heads(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_width(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        if self.frozen:
            trunk = self.arrays()[:-2]
            if any(not np.array_equal(a, b) for a, b in zip(trunk, arrays[:-2])):
                raise ConfigError("trunk is frozen; only the output head may change")
        return replace(self, weights=list(arrays[0::2]), biases=list(arrays[1::2]))

    def freeze(self) -> "MlpParams":
        ws = [w.copy() for w in self.weights]
        bs = [b.copy() for b in self.biases]
        for a in ws + bs:
            a.setflags(write=False)
        return replace(self, weights=ws, biases=bs, frozen=True)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays()[:-2]:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(json.dumps(self.activation.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]


def _check_shapes(weights, biases, input_dim):
    if len(weights) != len(biases) or len(weights) < 2:
        raise ConfigError("need at least one hidden layer plus the head, one bias per layer")
    fan_in = input_dim
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or w.shape[0] != fan_in:
            raise ConfigError(f"layer {i}: weight shape {w.shape} does not chain from width {fan_in}")
        if b.shape != (w.shape[1],):
            raise ConfigError(f"layer {i}: bias shape {b.shape} != ({w.shape[1]},)")
        fan_in = w.shape[1]


def init_network(arch: ArchSpec, seed: int) -> MlpParams:
    """Xavier-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dims = [arch.input_dim, *[int(w) for w in arch.widths], arch.heads]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, arch.activation, arch.input_dim, seed=seed)


# ---------------------------------------------------------------------------
# Jet propagation
# ---------------------------------------------------------------------------


def normalize_request(request: Iterable[str], input_dim: int) -> tuple:
    req = tuple(sorted(set(request), key=DERIVATIVES.index)) if request else ()
    for r in req:
        if r not in DERIVATIVES:
            raise ValueError(f"unknown derivative {r!r}; expected a subset of {DERIVATIVES}")
        if "x" in r and input_dim < 2:
            raise ValueError(f"derivative {r!r} needs a spatial input but the network has input_dim=1")
    return req


def _pairs(request) -> list:
    pairs = {"tt": (0, 0), "xt": (0, 1), "xx": (1, 1)}
    return [pairs[r] for r in request if r in pairs]


def _input_jet(points, input_dim, request) -> Jet2:
    pairs = _pairs(request)
    tracked = sorted({a for r in request for a in (_AXES[c] for c in r)})
    m = points.shape[0]
    d1 = []
    for k in range(input_dim):
        if k in tracked:
            e = np.zeros((m, input_dim))
            e[:, k] = 1.0
            d1.append(e)
        else:
            d1.append(None)
    return Jet2(points, tuple(d1), {p: None for p in pairs})


def trunk_jet(weights, biases, activation, points, request) -> Jet2:
    """Final hidden layer as a jet; ``weights``/``biases`` may be arrays or Vars."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    input_dim = value_shape(weights[0])[0]
    if points.shape[1] != input_dim:
        raise ValueError(f"points have {points.shape[1]} columns, network expects {input_dim}")
    jet = _input_jet(points, input_dim, request)
    for w, b in zip(weights[:-1], biases[:-1]):
        jet = jet_apply(activation, jet.linear(w, b))
    return jet


def value_shape(a):
    return a.value.shape if isinstance(a, Var) else np.shape(a)


def jet_forward(params: MlpParams, point, request=()) -> dict:
    """Hidden row H and requested derivative rows at a single input point."""
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    if point.shape[1] != params.input_dim:
        raise ValueError(f"point dimension {point.shape[1]} != network input dim {params.input_dim}")
    batch = eval_hidden(params, point, request, bias_column=False)
    return {k: v[0] for k, v in batch.matrices.items()}


@dataclass(frozen=True)
class JetBatch:
    """Frozen hidden states H (and derivative matrices) on a point grid."""

    points: np.ndarray
    matrices: dict
    checkpoint_hash: str = ""
    grid_hash: str = ""

    def __post_init__(self):
        shapes = {m.shape for m in self.matrices.values()}
        if len(shapes) != 1:
            raise ValueError(f"jet matrices disagree in shape: {shapes}")
        for m in self.matrices.values():
            m.setflags(write=False)

    @property
    def H(self) -> np.ndarray:
        return self.matrices["H"]

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.matrices[key]
        except KeyError:
            raise KeyError(f"JetBatch has no {key!r} matrix (available: {sorted(self.matrices)})") from None

    def __contains__(self, key: str) -> bool:
        return key in self.matrices

    @property
    def shape(self) -> tuple:
        return self.H.shape

    @property
    def provenance(self) -> str:
        return f"{self.checkpoint_hash}:{self.grid_hash}"


def grid_hash(points: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(points, dtype="<f8").tobytes()).hexdigest()[:16]


_KEYS = {"t": "H_t", "tt": "H_tt", "x": "H_x", "xx": "H_xx", "xt": "H_xt"}


def eval_hidden(params: MlpParams, grid, request=(), bias_column: bool = True) -> JetBatch:
    """Evaluate the frozen basis on ``grid``.

    With ``bias_column`` a constant-one column is appended to H (zeros to the
    derivative matrices) so the output bias is solved jointly with W_out.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if params.input_dim == 1 and grid.shape[0] == 1 and grid.shape[1] != 1:
        grid = grid.T
    if grid.shape[0] == 0:
        raise ValueError("eval_hidden needs a non-empty grid")
    req = normalize_request(request, params.input_dim)
    jet = trunk_jet(params.weights, params.biases, params.activation, grid, req)
    m, h = jet.value.shape
    mats = {"H": jet.value}
    for r in req:
        if r in ("t", "x"):
            comp = jet.d1[_AXES[r]]
        else:
            comp = jet.second(*_pairs([r])[0])
        mats[_KEYS[r]] = np.zeros((m, h)) if comp is None else comp
    if bias_column:
        mats = {
            k: np.hstack([v, np.full((m, 1), 1.0 if k == "H" else 0.0)]) for k, v in mats.items()
        }
    return JetBatch(grid.copy(), mats, params.fingerprint(), grid_hash(grid))


def forward(params: MlpParams, grid) -> np.ndarray:
    """Network output (m x q) at ``grid``."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    H = eval_hidden(params, grid, (), bias_column=False).H
    return H @ params.weights[-1] + params.biases[-1]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: MlpParams, path) -> Path:
    path = Path(path)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "input_dim": params.input_dim,
        "widths": list(params.widths),
        "heads": params.heads,
        "activation": params.activation.to_dict(),
        "seed": params.seed,
        "frozen": params.frozen,
        "provenance": params.provenance,
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = np.ascontiguousarray(w, dtype="<f8")
        arrays[f"b{i}"] = np.ascontiguousarray(b, dtype="<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> MlpParams:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            n_layers = len(meta["widths"]) + 1
            arrays = [data[f"{p}{i}"] for i in range(n_layers) for p in ("W", "b")]
    except FileNotFoundError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema version {meta.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    dims = [meta["input_dim"], *meta["widths"], meta["heads"]]
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if w.shape != (fi, fo) or b.shape != (fo,):
            raise CheckpointError(
                f"shape mismatch in layer {i}: got W{w.shape}, b{b.shape}, "
                f"architecture says W({fi}, {fo}), b({fo},)"
            )
        if w.dtype != np.dtype("<f8") or b.dtype != np.dtype("<f8"):
            raise CheckpointError(f"layer {i} is not little-endian float64")
    params = MlpParams(
        weights=[np.array(a, dtype=np.float64) for a in arrays[0::2]],
        biases=[np.array(a, dtype=np.float64) for a in arrays[1::2]],
        activation=ActivationSpec(**meta["activation"]),
        input_dim=meta["input_dim"],
        seed=meta.get("seed"),
        provenance=meta.get("provenance", {}),
    )
    return params.freeze() if meta.get("frozen") else params
