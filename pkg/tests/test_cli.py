import csv
import json
import subprocess
import sys
import time

import pytest

from oneshot_pinn.cli import RESULT_COLUMNS, run


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("ONESHOT_PINN_ROOT", str(tmp_path))
    return tmp_path


def train_small(root, family="first_order", *extra):
    return run(["train", "--family", family, "--iterations", "100", "--seed", "0", *extra])


def test_unknown_family_is_a_config_error(root, capsys):
    assert run(["train", "--family", "heat"]) == 2
    assert "unknown family" in capsys.readouterr().err


def test_missing_checkpoint(root, capsys):
    assert run(["infer", "--family", "first_order"]) == 3
    assert "train --family first_order" in capsys.readouterr().err


def test_bad_ridge_and_tests(root):
    assert run(["infer", "--family", "first_order", "--ridge", "lots"]) == 2
    assert train_small(root) == 0
    assert run(["infer", "--family", "first_order", "--tests", "-1"]) == 2


def test_train_smoke_run_and_artifacts(root):
    start = time.perf_counter()
    assert train_small(root) == 0
    assert time.perf_counter() - start < 10
    ck = root / "checkpoints" / "first_order_seed0.npz"
    assert ck.exists()
    assert (root / "checkpoints" / "first_order_seed0.log.csv").read_text().startswith("iteration,loss")
    cfg = json.loads((root / "checkpoints" / "first_order_seed0.config.json").read_text())
    assert cfg["family"] == "first_order" and cfg["schema_version"] == 1


def test_existing_checkpoint_needs_force(root, capsys):
    assert train_small(root) == 0
    assert train_small(root) == 2
    assert "--force" in capsys.readouterr().err
    assert train_small(root, "first_order", "--force") == 0


def test_zero_tests_writes_header_only(root):
    assert train_small(root) == 0
    assert run(["infer", "--family", "first_order", "--tests", "0"]) == 0
    lines = (root / "results" / "first_order_seed0_infer.csv").read_text().splitlines()
    assert lines == [",".join(RESULT_COLUMNS)]


def test_infer_is_deterministic(root):
    assert train_small(root) == 0
    out = root / "results" / "first_order_seed0_infer.csv"
    assert run(["infer", "--family", "first_order", "--tests", "5"]) == 0
    first = out.read_text()
    assert run(["infer", "--family", "first_order", "--tests", "5"]) == 0
    strip = lambda text: [r[:-2] for r in csv.reader(text.splitlines())]  # noqa: E731  solve_ms varies
    assert strip(out.read_text()) == strip(first)
    rows = list(csv.DictReader(first.splitlines()))
    assert len(rows) == 5 and float(rows[0]["residual_mse"]) >= 0
    summary = json.loads((root / "results" / "first_order_seed0_infer.json").read_text())
    assert summary["n_tests"] == 5 and summary["config"]["family"] == "first_order"


def test_config_file_and_flag_precedence(root, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"family": "first_order", "seed": 4, "iterations": 50, "schema_version": 1}))
    assert run(["train", "--config", str(cfg), "--seed", "5"]) == 0
    assert (root / "checkpoints" / "first_order_seed5.npz").exists()
    cfg.write_text(json.dumps({"family": "first_order", "colour": "red"}))
    assert run(["train", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"family": "first_order", "schema_version": 9}))
    assert run(["train", "--config", str(cfg)]) == 2


def test_benchmark_only_filter(root):
    assert train_small(root) == 0
    assert run(["benchmark", "--only", "first_order", "--tests", "3"]) == 0
    rows = list(csv.DictReader((root / "results" / "benchmark.csv").open()))
    assert [r["family"] for r in rows] == ["first_order"]
    assert rows[0]["metric"] == "residual_mse"
    assert "first_order" in (root / "results" / "benchmark.txt").read_text()


def test_benchmark_skips_missing_checkpoints(root):
    with pytest.warns(UserWarning, match="no checkpoint"):
        assert run(["benchmark", "--only", "second_order"]) == 0


def test_rho_test_restricted_to_poisson(root):
    assert train_small(root) == 0
    assert run(["infer", "--family", "first_order", "--rho-test"]) == 2


def test_module_entry_point(root):
    proc = subprocess.run([sys.executable, "-m", "oneshot_pinn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "infer", "ablate-bundles", "benchmark"):
        assert cmd in proc.stdout


def test_ablate_bundles_writes_tables(root, capsys):
    argv = ["ablate-bundles", "--family", "first_order", "--iterations", "30", "--counts", "1,2", "--seeds", "0", "--tests", "4"]
    assert run(argv) == 0
    assert "bundles=1" in capsys.readouterr().out
    rows = list(csv.DictReader((root / "results" / "ablate_first_order.csv").open()))
    assert [int(r["bundles"]) for r in rows] == [1, 2]
    summary = (root / "results" / "ablate_first_order_summary.csv").read_text().splitlines()
    assert summary[0] == "bundles,mean_test_mse,median_test_mse,std_test_mse" and len(summary) == 3
