import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from pjitai import cli
from pjitai.domain import ContextVector, DecisionRecord, binary_schema, read_log, records_to_csv
from pjitai.learner import FitHealth

SMALL = {
    "setting": 1,
    "schema": "binary2",
    "trial": {"participants": 4, "stagger_weeks": 1, "study_length": 70, "update_days": [56]},
    "sampler": {"chains": 4, "warmup_draws": 150, "kept_draws": 200},
}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("sim")
    code = cli.main(["simulate", "--config", str(small_cfg), "--seed", "3", "--replicates", "2",
                     "--algorithm", "simple", "--out", str(out)])
    assert code == 0
    return out


def outputs(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_simulate_writes_logs_and_manifest(sim_dir):
    logs = sorted((sim_dir / "logs").glob("*.csv"))
    assert [p.name for p in logs] == ["simple_rep000.csv", "simple_rep001.csv"]
    man = json.loads((sim_dir / "manifest.json").read_text())
    (run,) = man["runs"]
    assert run["command"] == "simulate" and run["seed"] == 3
    assert run["replicates"] == {"simple": 2}
    assert {"numpy", "scipy", "python", "pjitai"} <= set(run["versions"])
    assert "logs/simple_rep000.csv" in run["outputs"]


def test_simulate_rerun_is_byte_identical(sim_dir, small_cfg, tmp_path):
    cli.main(["simulate", "--config", str(small_cfg), "--seed", "3", "--replicates", "2",
              "--algorithm", "simple", "--out", str(tmp_path)])
    assert outputs(tmp_path) == outputs(sim_dir)
    a = json.loads((sim_dir / "manifest.json").read_text())["runs"][0]
    b = json.loads((tmp_path / "manifest.json").read_text())["runs"][0]
    a.pop("wall_clock_seconds"), b.pop("wall_clock_seconds")
    assert a == b


def test_default_replicate_counts(tmp_path):
    args = cli.build_parser().parse_args(["simulate", "--out", str(tmp_path)])
    cfg = cli.resolve_experiment(args)
    assert cfg.replicates == {"simple": 50, "ls4l2": 50, "complicated": 5}


def test_regret_rows_and_independent_recompute(sim_dir, tmp_path):
    assert cli.main(["regret", str(sim_dir), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "regret_simple.csv").open()))
    schema = binary_schema(2)
    logs = [read_log(p, schema) for p in sorted((sim_dir / "logs").glob("*.csv"))]
    n = min(len(r) for r in logs)
    assert len(rows) == n
    cums = []
    for recs in logs:
        total, out = 0.0, []
        for r in recs:
            hi = max(r.true_prob_send, r.true_prob_nosend)
            lo = min(r.true_prob_send, r.true_prob_nosend)
            total += 0.95 * hi + 0.05 * lo - (r.true_prob_send if r.action == 1 else r.true_prob_nosend)
            out.append(total)
        cums.append(out[:n])
    mean = np.mean(cums, axis=0)
    assert np.max(np.abs(mean - [float(r["mean"]) for r in rows])) < 1e-9
    assert list(rows[0]) == ["decision_index", "mean", "q25", "q75"]


def test_regret_without_simulate_is_invalid(tmp_path):
    assert cli.main(["regret", str(tmp_path)]) == 1


@pytest.fixture(scope="module")
def fit_dir(sim_dir, small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = cli.main(["fit", "--config", str(small_cfg), "--data", str(sim_dir / "logs" / "simple_rep000.csv"),
                     "--algorithm", "simple", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


def test_fit_outputs(fit_dir):
    diag = json.loads((fit_dir / "diagnostics.json").read_text())
    assert diag["health"]["status"] == "ok"
    header = (fit_dir / "posterior.csv").read_text().splitlines()[0]
    assert "A" in header.split(",")


def test_policy_table_from_fit(fit_dir, tmp_path):
    code = cli.main(["policy-table", "--posterior", str(fit_dir / "posterior.csv"), "--schema", "binary2",
                     "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "policy.csv").open()))
    assert len(rows) == 9 * 3
    assert all(0.05 <= float(r["send_prob"]) <= 0.95 for r in rows)
    again = tmp_path / "again"
    cli.main(["policy-table", "--posterior", str(fit_dir / "posterior.csv"), "--schema", "binary2", "--out", str(again)])
    assert (again / "policy.csv").read_bytes() == (tmp_path / "policy.csv").read_bytes()


def test_policy_table_refuses_broken_posterior(fit_dir, tmp_path):
    diag = json.loads((fit_dir / "diagnostics.json").read_text())
    diag["health"] = FitHealth("broken-mixing", ("rhat[A]=1.3",)).to_dict()
    bad = tmp_path / "diag.json"
    bad.write_text(json.dumps(diag))
    code = cli.main(["policy-table", "--posterior", str(fit_dir / "posterior.csv"), "--diagnostics", str(bad),
                     "--schema", "binary2", "--out", str(tmp_path / "o")])
    assert code == 2


def test_fit_breakage_exit_code(monkeypatch, sim_dir, tmp_path):
    monkeypatch.setattr(cli, "fit_posterior", lambda *a, **k: (None, FitHealth("broken-no-draws", ("boom",))))
    code = cli.main(["fit", "--schema", "binary2", "--data", str(sim_dir / "logs" / "simple_rep000.csv"),
                     "--out", str(tmp_path)])
    assert code == 2


def test_calibrate_fixture(tmp_path):
    schema = binary_schema(1)
    ctx = ContextVector(("weekday",))
    recs = [DecisionRecord("p000", i, 0, ctx, 0.775, int(i < 77), 0, 0.5, 0.5) for i in range(100)]
    log = tmp_path / "log.csv"
    log.write_text(records_to_csv(recs, schema))
    assert cli.main(["calibrate", "--log", str(log), "--schema", "binary1", "--out", str(tmp_path / "c")]) == 0
    rows = [r for r in csv.DictReader((tmp_path / "c" / "calibration.csv").open()) if r["n"] != "0"]
    assert len(rows) == 1
    r = rows[0]
    assert float(r["p_hat"]) == pytest.approx(0.77)
    assert float(r["ci_high"]) - 0.77 == pytest.approx(0.0825, abs=5e-4)
    assert r["covers"] == "1"


@pytest.mark.parametrize("argv", [
    ["simulate", "--out", "x", "--setting", "5"],
    ["simulate"],
    ["nonsense"],
    ["calibrate", "--log", "missing.csv", "--out", "x"],
])
def test_invalid_input_exit_code(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1


def test_unknown_config_field(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trial:\n  participantz: 3\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_simulate_breakage_exit_code(monkeypatch, small_cfg, tmp_path):
    from pjitai import simulator

    monkeypatch.setattr(simulator, "fit_posterior", lambda *a, **k: (None, FitHealth("broken-no-draws", ("boom",))))
    code = cli.main(["simulate", "--config", str(small_cfg), "--replicates", "1", "--algorithm", "simple",
                     "--out", str(tmp_path)])
    assert code == 2
    assert (tmp_path / "failures" / "simple_rep000.csv").exists()
