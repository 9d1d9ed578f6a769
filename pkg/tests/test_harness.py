import json

import numpy as np
import pytest

from conftest import MIXES_CSV, STRENGTHS_CSV
from mixopt import cli, harness
from mixopt.dataset import parse_mix_table
from mixopt.gp import FitError
from mixopt.harness import (
    BoOptions,
    ConfigError,
    FitOptions,
    ReportConflictError,
    RunConfig,
    RunDir,
    SplitOptions,
)
from mixopt.inverse import InverseQuery
from mixopt.mobo import hypervolume
from mixopt.synthetic import generate_synthetic

QUICK = dict(
    fit=FitOptions(max_iters=20),
    split=SplitOptions(test_seeds=(1,)),
    bo=BoOptions(q=3, n_samples=128, raw_samples=16, restarts=1, max_evals=60, rounds=5),
    inverse=InverseQuery(strength_thresholds=(6000,), candidates_per_bin=5),
    inverse_budget=1000,
)


@pytest.fixture
def quick(tmp_path):
    return RunConfig(out=str(tmp_path / "run"), **QUICK)


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- config


def test_config_round_trip_and_hash(quick):
    again = RunConfig.from_dict(json.loads(json.dumps(quick.to_dict())))
    assert again == quick
    assert again.hash == quick.hash
    assert quick.with_overrides(out="elsewhere").hash == quick.hash
    assert quick.with_overrides(seed=1).hash != quick.hash
    assert quick.with_overrides(seed=None) == quick


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigError, match="unknown keys in bo"):
        RunConfig.from_dict({"bo": {"qq": 4}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"inverse": {"gwp_bin_width": -5}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        harness.load_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        harness.load_config(tmp_path / "missing.json")


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "bo": {"q": 2}, "split": {"test_seeds": [3]}}))
    config = harness.load_config(path)
    assert config.seed == 7 and config.bo.q == 2 and config.split.test_seeds == (3,)
    assert harness.load_config(None) == RunConfig()


def test_run_dir_is_write_once(quick):
    run = RunDir(quick)
    path = run.write_csv("a/table.csv", "x\n1\n")
    assert path.read_text().splitlines()[:2] == [f"# config_hash={quick.hash}", f"# seed={quick.seed}"]
    run.write_csv("a/table.csv", "x\n1\n")  # identical content is fine
    with pytest.raises(ReportConflictError):
        run.write_csv("a/table.csv", "x\n2\n")
    payload = json.loads(run.write_json("a/s.json", {"k": 1}).read_text())
    assert payload["config_hash"] == quick.hash
    assert RunConfig.from_dict(payload["config"]).hash == quick.hash


# ---------------------------------------------------------------- phase-wise training


def test_thirty_eval_tables():
    config = RunConfig(fit=FitOptions(max_iters=10))
    reports = harness.train_phasewise(config, write=False)
    assert len(reports) == 30
    assert sorted({(r.seed, r.phase) for r in reports}) == [(s, p) for s in range(1, 6) for p in range(1, 7)]
    for r in reports:
        assert r.table.pooled.n == 60
        assert len(r.parity) == 60
    assert [r.n_train_mixes for r in reports[:6]] == sorted(r.n_train_mixes for r in reports[:6])
    summary = harness.phasewise_summary(reports)
    assert summary["n_reports"] == 30 and summary["final_phase"] == "VI"


def test_phasewise_files_deterministic(quick, tmp_path):
    d = generate_synthetic(quick.synthetic)
    harness.train_phasewise(quick, d)
    other = quick.with_overrides(out=str(tmp_path / "again"))
    harness.train_phasewise(other, d)
    first, second = tree(tmp_path / "run"), tree(tmp_path / "again")
    assert first == second
    parity = first["phasewise/seed1/phaseVI_parity.csv"].decode().splitlines()
    rows = [l for l in parity if not l.startswith("#")][1:]
    assert len(rows) == 60
    assert "phasewise/trajectory.csv" in first and "phasewise/final_by_age.csv" in first
    # a rerun into the same directory reproduces identical bytes and is accepted
    harness.train_phasewise(quick, d)


def test_phasewise_error_context(quick, monkeypatch):
    def broken(*args, **kwargs):
        raise FitError("boom")

    monkeypatch.setattr(harness, "fit_model", broken)
    with pytest.raises(FitError, match="testing set 1, phase I: boom"):
        harness.train_phasewise(quick, write=False)


# ---------------------------------------------------------------- suggest / campaign


@pytest.fixture(scope="module")
def phase4():
    from mixopt.dataset import phase_schedule

    return phase_schedule(generate_synthetic(RunConfig().synthetic))[3]


def test_suggest_honors_q_and_seed(quick, tmp_path, phase4):
    res = harness.cmd_suggest(quick, phase4, iteration=2)
    assert len(res.batch) == quick.bo.q
    assert res.hv_after_predicted >= res.hv_before
    again = quick.with_overrides(out=str(tmp_path / "b"))
    harness.cmd_suggest(again, phase4, iteration=2)
    a = (tmp_path / "run/suggest/iter2_batch.csv").read_text()
    b = (tmp_path / "b/suggest/iter2_batch.csv").read_text()
    assert a == b
    assert len([l for l in a.splitlines() if l.startswith("BO2-")]) == quick.bo.q
    log = json.loads((tmp_path / "run/suggest/iter2_log.json").read_text())
    assert log["hv_before"] == pytest.approx(hypervolume(np.array(log["pareto_set"]), log["reference_point"]))


def test_campaign_trajectory(quick):
    res = harness.run_bo_campaign(quick, seed=1)
    assert len(res.rounds) == 5
    assert len(res.evaluated) == 5 * quick.bo.q
    hv = [hypervolume(np.array(r["pareto_set_observed"]), quick.bo.reference) for r in res.rounds]
    assert hv == pytest.approx(res.hv_trajectory, rel=1e-12)
    assert all(b >= a for a, b in zip(hv, hv[1:]))
    assert res.hv_true > 0


def test_random_baseline_deterministic(quick):
    a, hv_a = harness.random_baseline(quick, 3)
    b, hv_b = harness.random_baseline(quick, 3)
    assert a == b and hv_a == hv_b
    assert len(a) == quick.bo.q * quick.bo.rounds


# ---------------------------------------------------------------- command line


def write_inputs(tmp_path):
    (tmp_path / "mixes.csv").write_text(MIXES_CSV)
    (tmp_path / "strengths.csv").write_text(STRENGTHS_CSV)
    config = {k: v for k, v in RunConfig(**QUICK).to_dict().items() if k in QUICK}
    (tmp_path / "config.json").write_text(json.dumps(config))
    return ["--config", str(tmp_path / "config.json")]


def test_cli_commands_and_reruns(tmp_path, capsys):
    base = write_inputs(tmp_path)
    out = ["--out", str(tmp_path / "o")]
    data = ["--mixes", str(tmp_path / "mixes.csv"), "--strengths", str(tmp_path / "strengths.csv")]
    assert cli.main(["ingest", *base, *out, *data]) == 0
    assert cli.main(["generate-synthetic", *base, *out]) == 0
    assert cli.main(["gwp", *base, *out, *data]) == 0
    assert cli.main(["predict", *base, *out, *data, "--query", str(tmp_path / "mixes.csv"), "--ages", "7", "28"]) == 0
    assert cli.main(["evaluate", *base, *out]) == 0
    assert cli.main(["inverse", *base, *out]) == 0
    first = tree(tmp_path / "o")
    assert cli.main(["gwp", *base, *out, *data]) == 0
    assert tree(tmp_path / "o") == first
    synthetic = parse_mix_table((tmp_path / "o/mixes.csv").read_text(), (tmp_path / "o/strengths.csv").read_text())
    assert len(synthetic.mixes) == 123
    predictions = (tmp_path / "o/predict/predictions.csv").read_text().splitlines()
    assert predictions[2] == "mix_id,age_days,mean_ksi,lower_ksi,upper_ksi"
    assert len(predictions) == 3 + 3 * 2
    assert "inverse/report.csv" in first and "evaluate/eval.csv" in first
    capsys.readouterr()


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    base = write_inputs(tmp_path)
    out = ["--out", str(tmp_path / "o")]
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert cli.main(["gwp", "--config", str(tmp_path / "bad.json"), *out]) == 2
    assert cli.main(["ingest", *base, *out]) == 2  # no mixes file
    (tmp_path / "neg.csv").write_text(MIXES_CSV.replace("C1,concrete,500", "C1,concrete,-500"))
    assert cli.main(["gwp", *base, *out, "--mixes", str(tmp_path / "neg.csv")]) == 3
    assert "row 3" in capsys.readouterr().err
    (tmp_path / "f.csv").write_text("constituent,g_m,g_t,g_p\ncement,1,0,0\n")
    assert cli.main(["gwp", *base, *out, "--factors", str(tmp_path / "f.csv")]) == 3
    assert cli.main(["gwp", *base, *out, "--seed", "1"]) == 0
    (tmp_path / "o/gwp/gwp.csv").write_text("tampered\n")
    assert cli.main(["gwp", *base, *out, "--seed", "1"]) == 2

    def broken(*args, **kwargs):
        raise FitError("no factorization")

    monkeypatch.setattr(harness, "fit_model", broken)
    assert cli.main(["evaluate", *base, "--out", str(tmp_path / "p")]) == 4
    assert "numerical failure" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
