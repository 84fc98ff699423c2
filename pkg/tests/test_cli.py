import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

import popinv.autodiff as ad
from popinv.cli import main
from popinv.experiments import get_preset


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path):
    cfg = get_preset("darcy_uncorrelated").override(
        **{
            "data.n": 200,
            "learn.iterations": 15,
            "learn.n_samples": 80,
            "learn.n_slices": 15,
        }
    )
    path = tmp_path / "tiny.json"
    path.write_text(cfg.to_json())
    return str(path)


def _generate(runner, tiny_config, tmp_path, **kw):
    data = str(tmp_path / "pop.csv")
    args = ["generate", tiny_config, "--out", data, "--seed", "3"]
    res = runner.invoke(main, args, **kw)
    assert res.exit_code == 0, res.output
    return data


def test_generate_then_infer_then_score(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    assert os.path.exists(data) and os.path.exists(data + ".meta.json")

    out = str(tmp_path / "run")
    res = runner.invoke(
        main, ["infer", tiny_config, "--data", data, "--out", out, "--seed", "5", "--quiet"]
    )
    assert res.exit_code == 0, res.output
    assert os.path.exists(os.path.join(out, "trace.csv"))
    assert os.path.exists(os.path.join(out, "summary.json"))
    assert "rel err" in res.output

    res = runner.invoke(main, ["score", "--run", out])
    assert res.exit_code == 0, res.output
    assert "score consistent" in res.output


def test_infer_refuses_stale_output_and_resume(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    out = tmp_path / "occupied"
    out.mkdir()
    (out / "leftover.txt").write_text("x")
    res = runner.invoke(main, ["infer", tiny_config, "--data", data, "--out", str(out)])
    assert res.exit_code == 2
    assert "not empty" in res.output

    res = runner.invoke(
        main, ["infer", tiny_config, "--data", data, "--out", str(tmp_path / "new"), "--resume"]
    )
    assert res.exit_code == 2
    assert "not supported" in res.output


def test_unknown_config_is_a_usage_error(runner, tmp_path):
    res = runner.invoke(main, ["generate", "no_such_experiment", "--out", str(tmp_path / "x.csv")])
    assert res.exit_code == 2


def test_corrupt_data_reports_offset(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    blob = open(data, "rb").read()
    open(data, "wb").write(blob[:-200])
    res = runner.invoke(
        main, ["infer", tiny_config, "--data", data, "--out", str(tmp_path / "run2")]
    )
    assert res.exit_code == 3
    assert "byte offset" in res.output


def test_mismatched_dataset_dimension_is_a_data_error(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    l96 = tmp_path / "l96.json"
    l96.write_text(get_preset("l96_single_reduced").to_json())
    res = runner.invoke(main, ["infer", str(l96), "--data", data, "--out", str(tmp_path / "run3")])
    assert res.exit_code == 3


def test_seed_comes_from_environment(runner, tiny_config, tmp_path):
    data = str(tmp_path / "env.csv")
    res = runner.invoke(
        main, ["generate", tiny_config, "--out", data], env={"POPINV_SEED": "99"}
    )
    assert res.exit_code == 0, res.output
    meta = json.loads(open(data + ".meta.json").read())
    assert meta["seed"] == 99


def test_infer_writes_figures_on_request(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    out = str(tmp_path / "figrun")
    res = runner.invoke(
        main,
        ["infer", tiny_config, "--data", data, "--out", out, "--seed", "1", "--plots", "--quiet"],
    )
    assert res.exit_code == 0, res.output
    for name in ("loss.svg", "convergence.svg", "covariance.svg"):
        assert os.path.exists(os.path.join(out, name)), name


def test_study_writes_csv(runner, tmp_path):
    out = str(tmp_path / "study.csv")
    res = runner.invoke(
        main,
        [
            "study", "--modes", "cut", "--n-grid", "150", "--gamma-grid", "0.1",
            "--repeats", "1", "--iterations", "10", "--out", out, "--quiet",
        ],
    )
    assert res.exit_code == 0, res.output
    header = open(out).readline().strip()
    assert header == "mode,N,gamma_dagger,mean_rel_err,std_rel_err,runs"


def test_study_rejects_bad_mode(runner, tmp_path):
    res = runner.invoke(
        main, ["study", "--modes", "sideways", "--out", str(tmp_path / "s.csv")]
    )
    assert res.exit_code == 2


def test_score_detects_tampered_summary(runner, tiny_config, tmp_path):
    data = _generate(runner, tiny_config, tmp_path)
    out = str(tmp_path / "tamper")
    res = runner.invoke(
        main, ["infer", tiny_config, "--data", data, "--out", out, "--seed", "2", "--quiet"]
    )
    assert res.exit_code == 0, res.output
    spath = os.path.join(out, "summary.json")
    summary = json.loads(open(spath).read())
    summary["report"][0]["rel_err"] += 0.25
    open(spath, "w").write(json.dumps(summary))
    res = runner.invoke(main, ["score", "--run", out])
    assert res.exit_code == 3
    assert "disagree" in res.output


def test_verify_filter_runs_single_check(runner):
    res = runner.invoke(main, ["verify", "--filter", "lr-schedule"])
    assert res.exit_code == 0, res.output
    assert "lr-schedule" in res.output
    assert "FAIL" not in res.output


def test_verify_catches_injected_fault(runner):
    try:
        res = runner.invoke(
            main,
            ["verify", "--filter", "gradients-sliced", "--inject-fault", "sort-adjoint"],
        )
        assert res.exit_code == 5
        assert "FAIL" in res.output
    finally:
        ad._SORT_ADJOINT_FAULT = False


def test_verify_unknown_filter_fails(runner):
    res = runner.invoke(main, ["verify", "--filter", "zzz-no-such-check"])
    assert res.exit_code == 5
