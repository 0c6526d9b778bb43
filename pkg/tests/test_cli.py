"""Exit codes, file contracts, and override plumbing of the batch front end.

Most tests invoke main() in-process with a config written to tmp_path; one
test goes through the installed console script to cover the entry point.
Numeric expectations reuse the closed-form GOE oracles (rate quadrature
values from test_oracles, BBP map 2*theta + 1/(2*theta)); everything else
here is contract, not math: which files appear, which exit code fires,
which stream carries the diagnostic.
"""
import json
import subprocess
import sys

import numpy as np
import pytest

from kronldp.cli import main
from kronldp.mde import right_edge
from kronldp.model import structure_from_dict

from test_oracles import FROZEN_GOE_RATE

GOE_DOC = {"beta": 1, "A0": [[0.0]], "A": [[[1.0]]]}
PAIR_DOC = {"beta": 1, "A0": [[0.2, 0.0], [0.0, -0.1]],
            "A": [[[1.0, 0.0], [0.0, 0.5]], [[0.0, 0.4], [0.4, 0.0]]]}


def run_cli(tmp_path, doc, *flags, name="run.json"):
    cfg = tmp_path / name
    cfg.write_text(json.dumps(doc), encoding="utf-8")
    out = tmp_path / "out"
    return main(["--config", str(cfg), "--out", str(out), *flags]), out


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    body = [line.split(",") for line in lines[1:]]
    return header, body


# ---------------------------------------------------------------------------
# density

def test_density_semicircle_mass(tmp_path):
    doc = {"command": "density", "structure": GOE_DOC, "seed": 1, "density": {}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    header, body = read_csv(out / "density.csv")
    assert header == ["x", "density", "cell_mass"]
    mass = sum(float(row[2]) for row in body)
    assert mass == pytest.approx(1.0, abs=1e-3)
    support = json.loads((out / "support.json").read_text())
    assert support["r_inf"] == pytest.approx(2.0, abs=1e-6)
    assert support["left_edge"] == pytest.approx(-2.0, abs=1e-6)


def test_density_atoms_only_edge_is_exact(tmp_path):
    doc = {"command": "density", "seed": 1,
           "structure": {"beta": 1, "A0": [[1.7, 0.0], [0.0, -0.3]], "A": []}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    support = json.loads((out / "support.json").read_text())
    assert support["r_inf"] == 1.7
    # no continuous part to tabulate
    _, body = read_csv(out / "density.csv")
    assert body == []


def test_density_rerun_is_byte_identical(tmp_path):
    doc = {"command": "density", "structure": GOE_DOC, "seed": 1,
           "density": {"grid_size": 201}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc), encoding="utf-8")
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("density.csv", "support.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    meta = json.loads((outs[0] / "run_meta.json").read_text())
    assert meta["command"] == "density"
    assert meta["seed"] == 1
    assert "density.csv" in meta["files"]


# ---------------------------------------------------------------------------
# rate

def test_rate_goe_matches_quadrature_and_skips_bulk(tmp_path, capsys):
    doc = {"command": "rate", "structure": GOE_DOC, "seed": 1,
           "rate": {"x_grid": [1.5, 2.5, 3.0]}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    err = capsys.readouterr().err
    assert "1.5" in err and "skipped" in err
    _, body = read_csv(out / "rate.csv")
    got = {float(row[0]): float(row[1]) for row in body}
    assert set(got) == {2.5, 3.0}
    assert got[2.5] == pytest.approx(FROZEN_GOE_RATE[2.5], abs=1e-3)
    assert got[3.0] == pytest.approx(FROZEN_GOE_RATE[3.0], abs=1e-3)


def test_rate_beta2_at_most_twice_beta1(tmp_path):
    st = structure_from_dict(PAIR_DOC)
    edge = right_edge(st).r_inf
    grid = [edge + 0.5, edge + 1.0]
    vals = {}
    for beta in (1, 2):
        doc = {"command": "rate", "seed": 1,
               "structure": dict(PAIR_DOC, beta=beta),
               "rate": {"x_grid": grid}}
        code, out = run_cli(tmp_path, doc, name=f"b{beta}.json")
        assert code == 0
        _, body = read_csv(out / "rate.csv")
        vals[beta] = [float(row[1]) for row in body]
    for i2, i1 in zip(vals[2], vals[1]):
        assert i2 <= 2.0 * i1 + 1e-6


def test_rate_degenerate_model_exits_3(tmp_path, capsys):
    doc = {"command": "rate", "seed": 1,
           "structure": {"beta": 1, "A0": [[2.0, 0.0], [0.0, 1.0]], "A": []},
           "rate": {"x_grid": [3.0]}}
    code, _ = run_cli(tmp_path, doc)
    assert code == 3
    assert "degenerate" in capsys.readouterr().err


def test_rate_missing_grid_is_config_error(tmp_path, capsys):
    doc = {"command": "rate", "structure": GOE_DOC, "seed": 1, "rate": {}}
    code, _ = run_cli(tmp_path, doc)
    assert code == 1
    assert "x_grid" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# outlier

def test_outlier_bbp_column(tmp_path):
    doc = {"command": "outlier", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [0.6, 1.0, 2.0]}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    _, body = read_csv(out / "outlier.csv")
    z = [float(row[1]) for row in body]
    for got, theta in zip(z, (0.6, 1.0, 2.0)):
        assert got == pytest.approx(2 * theta + 1 / (2 * theta), abs=1e-6)


# ---------------------------------------------------------------------------
# simulate

def test_simulate_writes_draws_and_tail_record(tmp_path):
    doc = {"command": "simulate", "structure": GOE_DOC, "seed": 7,
           "simulate": {"N": 60, "reps": 40, "x": 2.05, "delta": 0.15}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    _, body = read_csv(out / "simulate.csv")
    assert len(body) == 40
    rec = json.loads((out / "tail.jsonl").read_text().splitlines()[0])
    assert rec["kind"] == "tail_estimate"
    assert rec["seed"] == 7
    assert rec["method"] == "direct"
    assert rec["version"]
    assert rec["structure"]
    assert 0.0 <= rec["p_hat"] <= 1.0


def test_simulate_zero_reps_exits_1(tmp_path, capsys):
    doc = {"command": "simulate", "structure": GOE_DOC, "seed": 1,
           "simulate": {"N": 20, "reps": 0}}
    code, _ = run_cli(tmp_path, doc)
    assert code == 1
    assert "reps must be positive" in capsys.readouterr().err


def test_simulate_seed_override_changes_draws(tmp_path):
    doc = {"command": "simulate", "structure": GOE_DOC, "seed": 7,
           "simulate": {"N": 30, "reps": 10}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc), encoding="utf-8")
    outs = {}
    for tag, flags in (("a", []), ("b", []), ("c", ["--seed", "8"])):
        out = tmp_path / tag
        assert main(["--config", str(cfg), "--out", str(out), *flags]) == 0
        outs[tag] = (out / "simulate.csv").read_bytes()
    assert outs["a"] == outs["b"]
    assert outs["a"] != outs["c"]


# ---------------------------------------------------------------------------
# config plumbing

def test_malformed_json_names_the_problem(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json", encoding="utf-8")
    assert main(["--config", str(cfg)]) == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_missing_structure_field_named(tmp_path, capsys):
    code, _ = run_cli(tmp_path, {"command": "rate", "seed": 1})
    assert code == 1
    assert "'structure'" in capsys.readouterr().err


def test_unknown_command_named(tmp_path, capsys):
    code, _ = run_cli(tmp_path, {"command": "transmogrify",
                                 "structure": GOE_DOC})
    assert code == 1
    assert "'command'" in capsys.readouterr().err


def test_invalid_structure_rejected(tmp_path, capsys):
    doc = {"command": "density", "seed": 1,
           "structure": {"beta": 1, "A0": [[0.0, 1.0], [0.0, 0.0]], "A": []}}
    code, _ = run_cli(tmp_path, doc)
    assert code == 1
    assert "structure" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "absent.json")]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_command_flag_overrides_config(tmp_path):
    doc = {"command": "density", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [1.0]}}
    code, out = run_cli(tmp_path, doc, "--command", "outlier")
    assert code == 0
    assert (out / "outlier.csv").exists()
    assert not (out / "density.csv").exists()


def test_threads_env_fallback_and_flag(tmp_path, monkeypatch):
    doc = {"command": "outlier", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [0.6, 1.0, 2.0]}}
    monkeypatch.setenv("KRONLDP_THREADS", "3")
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    assert json.loads((out / "run_meta.json").read_text())["threads"] == 3
    code, out = run_cli(tmp_path, doc, "--threads", "2", name="t2.json")
    assert code == 0
    assert json.loads((out / "run_meta.json").read_text())["threads"] == 2


def test_threads_env_garbage_is_config_error(tmp_path, monkeypatch, capsys):
    doc = {"command": "outlier", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [1.0]}}
    monkeypatch.setenv("KRONLDP_THREADS", "many")
    code, _ = run_cli(tmp_path, doc)
    assert code == 1
    assert "KRONLDP_THREADS" in capsys.readouterr().err


def test_thread_pool_output_matches_serial(tmp_path):
    doc = {"command": "rate", "structure": GOE_DOC, "seed": 1,
           "rate": {"x_grid": [2.3, 2.7, 3.1, 3.5]}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc), encoding="utf-8")
    bodies = []
    for tag, nthreads in (("s", "1"), ("p", "4")):
        out = tmp_path / tag
        assert main(["--config", str(cfg), "--out", str(out),
                     "--threads", nthreads]) == 0
        bodies.append((out / "rate.csv").read_bytes())
    assert bodies[0] == bodies[1]


def test_cells_are_locale_free_17g(tmp_path):
    doc = {"command": "outlier", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [1.0 / 3.0]}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    _, body = read_csv(out / "outlier.csv")
    cell = body[0][0]
    assert cell == f"{1.0 / 3.0:.17g}"
    assert float(cell) == 1.0 / 3.0  # round-trip exact


# ---------------------------------------------------------------------------
# verify subcommand (single fast suite here; the full run is the
# acceptance gate and lives in test_acceptance)

def test_verify_subset_writes_report(tmp_path):
    doc = {"command": "verify", "structure": GOE_DOC, "seed": 1,
           "verify": {"checks": ["mde-semicircle", "support-edges"]}}
    code, out = run_cli(tmp_path, doc)
    assert code == 0
    report = (out / "verify.txt").read_text()
    assert "mde-semicircle" in report and "PASS" in report
    assert "2/2 checks passed" in report


def test_verify_unknown_check_is_config_error(tmp_path, capsys):
    doc = {"command": "verify", "structure": GOE_DOC, "seed": 1,
           "verify": {"checks": ["no-such-suite"]}}
    code, _ = run_cli(tmp_path, doc)
    assert code == 1
    assert "no-such-suite" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# console script

def test_console_script_entry_point(tmp_path):
    doc = {"command": "outlier", "structure": GOE_DOC, "seed": 1,
           "outlier": {"theta_grid": [1.0]}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc), encoding="utf-8")
    proc = subprocess.run(
        [sys.executable, "-m", "kronldp.cli", "--config", str(cfg),
         "--out", str(tmp_path / "out")],
        capture_output=True, text=True)
    assert proc.returncode == 0
    _, body = read_csv(tmp_path / "out" / "outlier.csv")
    assert float(body[0][1]) == pytest.approx(2.5, abs=1e-6)
