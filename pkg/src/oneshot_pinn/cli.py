"""Command-line harness: ``oneshot-pinn {train|infer|ablate-bundles|benchmark}``.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
artifact, 4 numerical failure. Outputs go under ``$ONESHOT_PINN_ROOT``
(default ``./runs``) unless ``--out-dir`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .network import CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from .problems import (
    FAMILIES,
    SampleError,
    SolverConfig,
    evaluate,
    get_family,
    held_out_samples,
    poisson_superposition,
)
from .training import TrainConfig, train_bundles, write_log_csv

log = logging.getLogger("oneshot_pinn")

ROOT_ENV = "ONESHOT_PINN_ROOT"
CONFIG_SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

# Published reference values (test time in seconds, mean test MSE) and the
# desk-scale tolerance each row is checked against.
REFERENCE_RESULTS = {
    "first_order": (7.4e-3, 1.35e-10, 1e-5),
    "second_order": (3.4e-3, 2.84e-9, 1e-4),
    "coupled_osc": (4.7e-2, 2.29e-12, 1e-6),
    "nonlinear_osc": (5.2, 1.47e-4, 1e-3),
    "poisson": (33.2, 3.60e-5, 1e-3),
    "schrodinger": (19.4, 5.02e-5, 1e-3),
}
# which metric the tolerance applies to per row
REFERENCE_METRIC = {
    "first_order": "residual_mse",
    "second_order": "residual_mse",
    "coupled_osc": "residual_mse",
    "nonlinear_osc": "residual_mse",
    "poisson": "solution_mse",
    "schrodinger": "solution_mse",
}
RESULT_COLUMNS = ["index", "sample", "residual_mse", "solution_mse", "ic_error", "solve_ms", "path"]


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    """Serializable run description; ``extra`` holds command-specific knobs."""

    command: str
    family: str | None = None
    seed: int = 0
    checkpoint: str | None = None
    tests: int | None = None
    solver: str = "factor"
    ridge: object = "auto"
    output_dir: str | None = None
    iterations: int | None = None
    extra: dict = field(default_factory=dict)
    schema_version: int = CONFIG_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> dict:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise MissingArtifactError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version} unsupported (expected {CONFIG_SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return data


def merge_config(command: str, args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < config file < explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(ExperimentConfig.from_file(args.config))
    for name in ("family", "seed", "checkpoint", "tests", "solver", "ridge", "output_dir", "iterations"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values["command"] = command
    ridge = values.get("ridge", "auto")
    if ridge != "auto":
        try:
            values["ridge"] = float(ridge)
        except ValueError:
            raise ConfigError(f"--ridge must be a number or 'auto', got {ridge!r}") from None
    cfg = ExperimentConfig(**values)
    if cfg.family is not None and cfg.family not in FAMILIES:
        raise ConfigError(f"unknown family {cfg.family!r}; expected one of {sorted(FAMILIES)}")
    return cfg


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get(ROOT_ENV, "runs"))


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return output_root(cfg) / "checkpoints" / f"{cfg.family}_seed{cfg.seed}.npz"


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


def write_results_csv(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for i, r in enumerate(rows):
            w.writerow([i] + [_fmt(r.get(c)) for c in RESULT_COLUMNS[1:]])
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _train_config(cfg: ExperimentConfig, bundles: int | None = None) -> TrainConfig:
    extra = dict(cfg.extra)
    kwargs = {k: extra[k] for k in ("lr", "collocation", "widths", "resample", "loss_weights", "bundles") if k in extra}
    return TrainConfig(cfg.family, seed=cfg.seed, iterations=cfg.iterations, n_bundles=bundles or extra.get("n_bundles"), **kwargs)


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    if cfg.family is None:
        raise ConfigError("train needs --family")
    path = checkpoint_path(cfg)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    tc = _train_config(cfg)
    start = time.perf_counter()
    params, rows = train_bundles(tc, on_log=lambda r: log.info("iter %(iteration)d loss %(loss).3e", r))
    save_checkpoint(params, path)
    write_log_csv(rows, path.with_suffix(".log.csv"))
    _write_json(path.with_suffix(".config.json"), json.loads(cfg.to_json()))
    log.info("checkpoint %s written in %.1f s", path, time.perf_counter() - start)
    return path


def _load(cfg: ExperimentConfig):
    path = checkpoint_path(cfg)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found; run `oneshot-pinn train --family {cfg.family}` first")
    return load_checkpoint(path)


def _solver(cfg: ExperimentConfig) -> SolverConfig:
    kw = {k: cfg.extra[k] for k in ("finetune_epochs", "finetune_lr", "newton_steps", "oracle") if k in cfg.extra}
    return SolverConfig(path=cfg.solver, ridge=cfg.ridge, **kw)


def cmd_infer(cfg: ExperimentConfig) -> dict:
    if cfg.family is None:
        raise ConfigError("infer needs --family")
    params = _load(cfg)
    stem = output_root(cfg) / "results" / f"{cfg.family}_seed{cfg.seed}"
    if cfg.extra.get("rho_test"):
        if cfg.family != "poisson":
            raise ConfigError("--rho-test applies to the poisson family only")
        res = poisson_superposition(params, _solver(cfg))
        grid_path = stem.with_name(stem.name + "_rho_test.csv")
        grid_path.parent.mkdir(parents=True, exist_ok=True)
        with open(grid_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "x", "prediction", "exact", "squared_error"])
            for row in zip(res["y"], res["x"], res["prediction"], res["exact"]):
                w.writerow([repr(float(v)) for v in row] + [repr(float((row[2] - row[3]) ** 2))])
        summary = {k: res[k] for k in ("solution_mse", "mode_mse", "linearity_error", "solve_time", "path", "shape")}
        summary["config"] = asdict(cfg)
        _write_json(stem.with_name(stem.name + "_rho_test.json"), summary)
        return summary
    fam = get_family(cfg.family)
    tests = fam.test_count if cfg.tests is None else cfg.tests
    if tests < 0:
        raise ConfigError("--tests must be >= 0")
    samples = held_out_samples(fam, tests, seed=cfg.seed) if tests else []
    report = evaluate(fam, params, samples, _solver(cfg))
    write_results_csv(stem.with_name(stem.name + "_infer.csv"), report.rows)
    summary = report.summary()
    summary["config"] = asdict(cfg)
    _write_json(stem.with_name(stem.name + "_infer.json"), summary)
    return summary


def cmd_ablate_bundles(cfg: ExperimentConfig) -> list:
    family = cfg.family or "first_order"
    counts = [int(c) for c in cfg.extra.get("counts", [1, 2, 5, 10])]
    seeds = [int(s) for s in cfg.extra.get("seeds", [0, 1, 2])]
    tests = cfg.tests if cfg.tests is not None else 200
    samples = held_out_samples(family, tests, seed=1000)
    rows = []
    for count in counts:
        for seed in seeds:
            sub = ExperimentConfig("train", family, seed, iterations=cfg.iterations, extra=dict(cfg.extra))
            params, _ = train_bundles(_train_config(sub, bundles=count))
            report = evaluate(family, params, samples, SolverConfig(oracle=True))
            rows.append({
                "bundles": count,
                "seed": seed,
                "test_residual_mse": report.stat("residual_mse")[0],
                "test_solution_mse": report.stat("solution_mse")[0],
            })
            log.info("bundles=%d seed=%d residual mse %.3e", count, seed, rows[-1]["test_residual_mse"])
    out = output_root(cfg) / "results" / f"ablate_{family}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bundles", "seed", "test_residual_mse", "test_solution_mse"])
        for r in rows:
            w.writerow([r["bundles"], r["seed"], repr(r["test_residual_mse"]), repr(r["test_solution_mse"])])
    # summaries use the family's reference metric (residual MSE for the linear ODEs)
    metric = "test_" + REFERENCE_METRIC[family]
    summary = []
    for count in counts:
        v = np.array([r[metric] for r in rows if r["bundles"] == count])
        summary.append({"bundles": count, "mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std())})
    with open(out.with_name(f"ablate_{family}_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bundles", "mean_test_mse", "median_test_mse", "std_test_mse"])
        for s in summary:
            w.writerow([s["bundles"], repr(s["mean"]), repr(s["median"]), repr(s["std"])])
    return summary


def cmd_benchmark(cfg: ExperimentConfig, only=None, train_first: bool = False, force: bool = False) -> list:
    families = list(only) if only else list(REFERENCE_RESULTS)
    for f in families:
        if f not in FAMILIES:
            raise ConfigError(f"unknown family {f!r}")
    rows = []
    for f in families:
        sub = ExperimentConfig("infer", f, cfg.seed, None, cfg.tests, cfg.solver, cfg.ridge, cfg.output_dir, cfg.iterations, dict(cfg.extra))
        path = checkpoint_path(sub)
        if not path.exists():
            if not train_first:
                warnings.warn(f"no checkpoint for {f} at {path}; row skipped")
                continue
            cmd_train(ExperimentConfig("train", f, cfg.seed, None, None, output_dir=cfg.output_dir, iterations=cfg.iterations), force)
        summary = cmd_infer(sub)
        reference_time, reference_mse, tol = REFERENCE_RESULTS[f]
        metric = REFERENCE_METRIC[f]
        value = summary[f"{metric}_mean"]
        rows.append({
            "family": f,
            "train_bundles": len(load_checkpoint(path).provenance.get("bundles", [])),
            "test_bundles": summary["n_tests"],
            "test_time_s": summary["inference_time"],
            "metric": metric,
            "test_mse_mean": value,
            "test_mse_std": summary[f"{metric}_std"],
            "reference_time_s": reference_time,
            "reference_mse": reference_mse,
            "tolerance": tol,
            "pass": bool(value <= tol),
        })
    out = output_root(cfg) / "results" / "benchmark.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    keys = ["family", "train_bundles", "test_bundles", "test_time_s", "metric", "test_mse_mean", "test_mse_std",
            "reference_time_s", "reference_mse", "tolerance", "pass"]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])
    text = format_table(rows)
    out.with_suffix(".txt").write_text(text + "\n")
    print(text)
    return rows


def format_table(rows) -> str:
    head = f"{'family':<14} {'#train':>6} {'#test':>6} {'time (s)':>10} {'MSE':>22} {'ref. MSE':>10} {'tol':>8}  ok"
    lines = [head, "-" * len(head)]
    for r in rows:
        mse = f"{r['test_mse_mean']:.2e} +/- {r['test_mse_std']:.1e}"
        lines.append(
            f"{r['family']:<14} {r['train_bundles']:>6} {r['test_bundles']:>6} {r['test_time_s']:>10.3g} "
            f"{mse:>22} {r['reference_mse']:>10.2e} {r['tolerance']:>8.0e}  {'yes' if r['pass'] else 'NO'}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON ExperimentConfig; flags override its values")
    p.add_argument("--family", required=False, help=f"one of {', '.join(FAMILIES)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="checkpoint path (default: <root>/checkpoints/<family>_seed<seed>.npz)")
    p.add_argument("--out-dir", dest="output_dir", help=f"output root (default ${ROOT_ENV} or ./runs)")
    p.add_argument("--iterations", type=int, help="training iterations (family default otherwise)")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oneshot-pinn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a frozen multi-head trunk for one family")
    _common(p)
    p.add_argument("--bundles", type=int, dest="n_bundles", help="number of training bundles")
    p.add_argument("--lr", type=float)
    p.add_argument("--collocation", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")

    p = sub.add_parser("infer", help="one-shot solves on held-out equations")
    _common(p)
    p.add_argument("--tests", type=int, help="number of test equations (family default otherwise)")
    p.add_argument("--solver", choices=["factor", "qr", "normal", "auto"])
    p.add_argument("--ridge", help="ridge lambda or 'auto'")
    p.add_argument("--rho-test", action="store_true", help="poisson: solve the four-mode superposition source")

    p = sub.add_parser("ablate-bundles", help="test MSE against number of training bundles")
    _common(p)
    p.add_argument("--counts", default="1,2,5,10")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--tests", type=int)

    p = sub.add_parser("benchmark", help="summary table over all families")
    _common(p)
    p.add_argument("--only", action="append", help="restrict to a family (repeatable)")
    p.add_argument("--train-first", action="store_true", help="train missing checkpoints")
    p.add_argument("--tests", type=int)
    p.add_argument("--solver", choices=["factor", "qr", "normal", "auto"])
    p.add_argument("--ridge")
    p.add_argument("--force", action="store_true")
    return parser


def _limit_threads(n: int | None):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # env vars only reach pools created later
        return None
    return threadpool_limits(n)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _limit_threads(args.threads)
        cfg = merge_config(args.command, args)
        if args.command == "train":
            for k in ("n_bundles", "lr", "collocation"):
                if getattr(args, k) is not None:
                    cfg.extra[k] = getattr(args, k)
            print(cmd_train(cfg, args.force))
        elif args.command == "infer":
            if args.rho_test:
                cfg.extra["rho_test"] = True
            print(json.dumps(cmd_infer(cfg), indent=2, sort_keys=True, default=_json_default))
        elif args.command == "ablate-bundles":
            cfg.extra["counts"] = [int(c) for c in args.counts.split(",")]
            cfg.extra["seeds"] = [int(s) for s in args.seeds.split(",")]
            for s in cmd_ablate_bundles(cfg):
                print(f"bundles={s['bundles']:<3d} median test MSE {s['median']:.3e} (std {s['std']:.1e})")
        elif args.command == "benchmark":
            cmd_benchmark(cfg, args.only, args.train_first, args.force)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MissingArtifactError, CheckpointError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, SampleError, FileExistsError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
