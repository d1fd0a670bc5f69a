import os
import shutil

import numpy as np
import pytest

from tailcast.cli import EXIT_GATE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from tailcast.distributions import Exponential
from tailcast.forecaster import write_score_file
from tailcast.rng import stream


def run(*argv):
    return main(list(argv))


def test_unknown_command_is_usage_error(capsys):
    assert run("no-such-command") == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_missing_required_argument(capsys):
    assert run("forecast") == EXIT_USAGE


@pytest.fixture()
def score_file(tmp_path):
    path = tmp_path / "scores.txt"
    write_score_file(path, Exponential(1.0).sample(2000, stream(0, 0)))
    return str(path)


def test_forecast_command(tmp_path, score_file, capsys):
    out = str(tmp_path / "fc")
    assert run("forecast", "--scores", score_file, "--deploy-sizes", "1e5,1e6",
               "--out", out) == EXIT_OK
    assert "prediction=" in capsys.readouterr().out
    csv_path = os.path.join(out, "forecast.csv")
    first = open(csv_path, "rb").read()
    assert run("forecast", "--scores", score_file, "--deploy-sizes", "1e5,1e6",
               "--out", out) == EXIT_OK
    assert open(csv_path, "rb").read() == first  # byte-identical rerun
    assert os.path.exists(os.path.join(out, "manifest.txt"))


def test_forecast_k_exceeds_scores(tmp_path, score_file):
    assert run("forecast", "--scores", score_file, "--k", "5000",
               "--out", str(tmp_path / "fc2")) == EXIT_USAGE


def test_forecast_missing_file(tmp_path):
    assert run("forecast", "--scores", str(tmp_path / "absent.txt"),
               "--out", str(tmp_path / "fc3")) == EXIT_RUNTIME


def test_coverage_command(tmp_path, capsys):
    assert run("coverage", "--cache-size", "296", "--fit-size", "96",
               "--deploy-size", "1920", "--k", "10") == EXIT_OK
    out = capsys.readouterr().out
    assert "0.082" in out and "guaranteed deploy ranks 200" in out
    out_dir = str(tmp_path / "cov")
    assert run("coverage", "--cache-size", "296", "--fit-size", "96",
               "--deploy-size", "1920", "--k", "10", "--out", out_dir) == EXIT_OK
    assert os.path.exists(os.path.join(out_dir, "coverage.csv"))
    assert run("coverage", "--cache-size", "9999", "--fit-size", "96",
               "--deploy-size", "1920") == EXIT_USAGE


def test_decompose_command(tmp_path):
    out = str(tmp_path / "dec")
    assert run("decompose", "--dist", "exp:rate=1", "--fit-size", "200",
               "--deploy-size", "2000", "--k", "5", "--trials", "200",
               "--out", out) == EXIT_OK
    lines = open(os.path.join(out, "decomposition.csv")).read().splitlines()
    assert lines[0].startswith("source,rank,curvature")
    assert len(lines) == 2


def test_decompose_score_input(tmp_path, score_file):
    out = str(tmp_path / "dec2")
    assert run("decompose", "--scores", score_file, "--fit-size", "100",
               "--deploy-size", "1000", "--k", "5", "--trials", "100",
               "--out", out) == EXIT_OK


def test_ksweep_command(tmp_path):
    out = str(tmp_path / "ks")
    assert run("ksweep", "--dist", "exp:rate=1", "--fit-size", "200",
               "--ratio", "10", "--k-list", "5,10", "--trials", "100",
               "--out", out) == EXIT_OK
    assert run("ksweep", "--ratio", "0.5", "--out", out) == EXIT_USAGE


def test_validate_rank_inconclusive_at_low_trials(tmp_path, capsys):
    out = str(tmp_path / "vr")
    code = run("validate-rank", "--ratios", "10", "--trials", "2000",
               "--estimator-trials", "200", "--fit-size", "500", "--out", out)
    assert code == EXIT_GATE
    assert "inconclusive" in capsys.readouterr().err
    assert os.path.exists(os.path.join(out, "rank_table.csv"))


def test_validate_rank_bad_ratio(tmp_path):
    assert run("validate-rank", "--ratios", "1", "--trials", "100",
               "--out", str(tmp_path / "vr2")) == EXIT_USAGE


MINI_CONFIG = """\
bank_size=400
eps=5e-3
n_pretrain=16
n_train_pairs=2
n_held_out_pairs=1
pretrain_steps=2
finetune_steps=2
pools_per_step=1
sft_batch=8
M=8
N=160
k=4
C=40
rho=2
eval_every=1
"""


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("gw"))
    cfg_path = os.path.join(out, "mini.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(MINI_CONFIG)
    for stage in ("pretrain", "finetune", "sft", "evaluate"):
        code = main(["gridworld", stage, "--config", cfg_path,
                     "--seed", "0", "--out", out])
        assert code == EXIT_OK, stage
    return out, cfg_path


def test_gridworld_pipeline_outputs(mini_run):
    out, _ = mini_run
    for name in ("bank_seed0.txt", "pretrained_seed0.npz", "ours_seed0.npz",
                 "sft_seed0.npz", "comparison_seed0.csv",
                 "forecast_pairs_seed0.csv", "finetune_trace_seed0.jsonl"):
        assert os.path.exists(os.path.join(out, name)), name
    lines = open(os.path.join(out, "comparison_seed0.csv")).read().splitlines()
    assert len(lines) == 7  # header + six conditions
    conds = {line.split(",")[1] for line in lines[1:]}
    assert conds == {"pretrained", "cal", "sft", "sft_cal", "ours", "ours_cal"}


def test_gridworld_resume_appends_steps(mini_run):
    out, cfg_path = mini_run
    resume_cfg = os.path.join(out, "resume.cfg")
    with open(resume_cfg, "w") as fh:
        fh.write(MINI_CONFIG + "resume=1\n")
    assert main(["gridworld", "finetune", "--config", resume_cfg,
                 "--seed", "0", "--out", out]) == EXIT_OK
    from tailcast.finetune import RunTrace

    trace = RunTrace.load(os.path.join(out, "finetune_trace_seed0.jsonl"))
    steps = sorted({r["step"] for r in trace.step_records})
    assert steps == [0, 1, 2, 3]  # two runs of two steps, appended


def test_gridworld_rejects_unknown_config_key(tmp_path):
    cfg_path = str(tmp_path / "bad.cfg")
    with open(cfg_path, "w") as fh:
        fh.write("bank_size=400\nlearning_rate=0.1\n")
    assert main(["gridworld", "pretrain", "--config", cfg_path,
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_gridworld_finetune_without_pretrain_is_runtime_error(tmp_path, mini_run):
    _, cfg_path = mini_run
    empty = str(tmp_path / "empty")
    assert main(["gridworld", "finetune", "--config", cfg_path,
                 "--seed", "0", "--out", empty]) == EXIT_RUNTIME


def test_gridworld_bank_seed_mismatch_refused(tmp_path, mini_run, capsys):
    out, cfg_path = mini_run
    other = str(tmp_path / "other")
    os.makedirs(other)
    # model trained against bank seed 0 masquerading as seed 1
    shutil.copy(os.path.join(out, "pretrained_seed0.npz"),
                os.path.join(other, "pretrained_seed1.npz"))
    code = main(["gridworld", "finetune", "--config", cfg_path,
                 "--seed", "1", "--out", other])
    assert code == EXIT_RUNTIME
    assert "mismatch" in capsys.readouterr().err


def test_gridworld_corrupt_bank_refused(tmp_path, mini_run):
    _, cfg_path = mini_run
    out = str(tmp_path / "corrupt")
    os.makedirs(out)
    with open(os.path.join(out, "bank_seed0.txt"), "w") as fh:
        fh.write("# seed=5 eps=0.005\n")
    assert main(["gridworld", "pretrain", "--config", cfg_path,
                 "--seed", "0", "--out", out]) == EXIT_RUNTIME
