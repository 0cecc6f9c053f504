import json

import pytest
from click.testing import CliRunner

from gridroll.cli import main
from test_pipeline import feeder_dict


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def feeder_json(tmp_path):
    p = tmp_path / "feeder.json"
    p.write_text(json.dumps(feeder_dict(horizon=6)))
    return str(p)


def out_json(result):
    return json.loads(result.output.strip().splitlines()[-1])


def test_check_reports_scenario_facts(runner, feeder_json):
    res = runner.invoke(main, ["check", "--scenario", feeder_json])
    assert res.exit_code == 0
    body = out_json(res)
    assert body["valid"] and body["scenario"] == "feeder-test"
    assert body["vehicles"] == 2
    assert body["aggregators"] == ["north", "south"]
    assert body["base_case_violations"] == 0


def test_check_rejects_invalid_scenario(runner, tmp_path):
    raw = feeder_dict(horizon=6)
    raw["prices"]["dam"] = raw["prices"]["dam"][:3]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(raw))
    res = runner.invoke(main, ["check", "--scenario", str(p)])
    assert res.exit_code == 3
    body = out_json(res)
    assert body["valid"] is False and body["problems"]


def test_check_rejects_malformed_json(runner, tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    res = runner.invoke(main, ["check", "--scenario", str(p)])
    assert res.exit_code == 3
    assert "error" in out_json(res)


def test_dam_subcommand_costs(runner, feeder_json):
    res = runner.invoke(main, ["dam", "--scenario", feeder_json])
    assert res.exit_code == 0
    body = out_json(res)
    assert body["charged_kwh"] > 0
    assert body["discharged_kwh"] == 0.0
    assert body["dam_cost"] > 0
    cheap = runner.invoke(main, ["dam", "--scenario", feeder_json, "--no-boc"])
    assert out_json(cheap)["dam_cost"] <= body["dam_cost"] + 1e-9


def test_bm_single_shot_flag(runner, feeder_json):
    res = runner.invoke(main, ["bm", "--scenario", feeder_json, "--no-rwo"])
    assert res.exit_code == 0
    body = out_json(res)
    assert body["rolling"] is False and body["windows"] == 1


def test_run_writes_artifacts_and_summary(runner, feeder_json, tmp_path):
    outdir = tmp_path / "out"
    res = runner.invoke(main, ["run", "--scenario", feeder_json,
                               "--output-dir", str(outdir)])
    assert res.exit_code == 0, res.output
    body = out_json(res)
    assert body["exit_code"] == 0 and body["te_converged"]
    assert (outdir / "manifest.json").exists()
    assert len(body["outputs"]) == 10
    assert body["violations_post_te"] == 0


def test_run_seed_override_reaches_summary(runner, feeder_json, tmp_path):
    res = runner.invoke(main, ["run", "--scenario", feeder_json,
                               "--seed", "1234",
                               "--output-dir", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    body = out_json(res)
    assert body["seed"] == 1234
    assert body["flags"] == {"include_boc": True, "use_rwo": True,
                             "force_te": False}


def test_te_subcommand_forces_negotiation(runner, feeder_json, tmp_path):
    outdir = tmp_path / "out-te"
    res = runner.invoke(main, ["te", "--scenario", feeder_json,
                               "--output-dir", str(outdir)])
    assert res.exit_code == 0, res.output
    body = out_json(res)
    assert body["te_ran"] is True
    trace = (outdir / "te_trace.csv").read_text().splitlines()
    assert len(trace) > 1
