"""Multi-head PINNs with a frozen trunk and closed-form output weights."""

from .autodiff import Jet2, LossGraph, Var, grad_weights
from .network import ActivationSpec, ArchSpec, MlpParams, eval_hidden, init_network, load_checkpoint, save_checkpoint
from .oneshot import apply_factor, factorize_operator, solve_wout
from .problems import FAMILIES, evaluate, get_family, held_out_samples
from .training import Adam, TrainConfig, train_bundles

__version__ = "0.1.0"

__all__ = [
    "Adam", "ActivationSpec", "ArchSpec", "FAMILIES", "Jet2", "LossGraph", "MlpParams", "TrainConfig", "Var",
    "apply_factor", "eval_hidden", "evaluate", "factorize_operator", "get_family", "grad_weights",
    "held_out_samples", "init_network", "load_checkpoint", "save_checkpoint", "solve_wout", "train_bundles",
]
