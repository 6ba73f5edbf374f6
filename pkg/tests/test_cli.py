import csv
import json
import subprocess
import sys

import pytest

from simplerl.cli import main, run_lock
from simplerl.simple_loop import RunReport

TINY = ["--set", "env.episode_cap=160", "--set", "loop.iterations=2",
        "--set", "loop.interactions_per_iter=30", "--set", "loop.initial_collection=40",
        "--set", "loop.model_steps_first=2", "--set", "loop.model_steps_rest=1",
        "--set", "loop.ppo_epoch_unit=1", "--set", "loop.z_overrides=[]",
        "--set", "loop.z_final=1", "--set", "loop.n_agents=2", "--set", "loop.rollout_N=3",
        "--set", "model.batch_size=4", "--set", "ppo.minibatch_size=16",
        "--set", "run.eval_episodes=1"]


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SIMPLERL_OUTPUT_ROOT", str(tmp_path / "runs"))


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_dry_run_full_scale(capsys, tmp_path):
    assert main(["train-simple", "--dry-run", "--set", "env.episode_cap=400",
                 "--run-dir", str(tmp_path / "d")]) == 0
    out = _json_out(capsys)
    assert out[0]["real_interactions"] == 102_400 and out[0]["model_steps"] == 0


def test_usage_errors(capsys):
    assert main(["no-such-command"]) == 2
    assert main(["train-simple", "--preset", "nope", "--dry-run"]) == 2
    assert main(["train-simple", "--set", "loop.bogus=1", "--dry-run"]) == 2
    assert main(["train-simple", "--env", "space_invaders", "--dry-run"]) == 2
    assert main(["plot"]) == 2


def test_runtime_error_exit_code(tmp_path):
    assert main(["finetune", "--checkpoint", str(tmp_path / "missing.bin")]) == 3


def test_full_pipeline(capsys, tmp_path):
    simple, ppo = tmp_path / "simple", tmp_path / "ppo"
    assert main(["train-simple", *TINY, "--seed", "1", "--seed", "2",
                 "--run-dir", str(simple)]) == 0
    out = _json_out(capsys)
    assert [r["seed"] for r in out] == [1, 2]
    assert all(r["real_interactions"] == 100 for r in out)
    assert (simple / "seed1/config.txt").exists() and not (simple / "seed1/.lock").exists()

    assert main(["train-ppo-baseline", *TINY, "--seed", "1", "--steps", "80",
                 "--eval-every", "40", "--set", "run.baseline_envs=4",
                 "--run-dir", str(ppo)]) == 0
    base = _json_out(capsys)
    assert base[0]["real_interactions"] == 80

    table = tmp_path / "cmp.csv"
    assert main(["compare", "--simple", str(simple), "--baseline", str(ppo),
                 "--random-score", "-3", "--out", str(table)]) == 0
    capsys.readouterr()
    rows = list(csv.DictReader(open(table)))
    metrics = {r["metric"] for r in rows}
    assert {"simple_mean", "normalized_fraction", "steps_to_match", "budget"} <= metrics

    assert main(["plot", "--runs", str(simple), str(ppo), "--compare", str(table),
                 "--out", str(tmp_path / "plots")]) == 0
    written = _json_out(capsys)
    assert len(written) == 3
    first = [open(p, "rb").read() for p in written]
    assert main(["plot", "--runs", str(simple), str(ppo), "--compare", str(table),
                 "--out", str(tmp_path / "plots")]) == 0
    capsys.readouterr()
    assert [open(p, "rb").read() for p in written] == first

    ckpt = simple / "seed1/checkpoints/iter_02/policy.bin"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--episodes", "2",
                 "--set", "env.episode_cap=160"]) == 0
    ev = _json_out(capsys)
    assert len(ev["scores"]) == 2 and ev["temperature"] == 0.5

    assert main(["finetune", "--checkpoint", str(ckpt), "--steps", "40", *TINY,
                 "--set", "run.baseline_envs=4", "--run-dir", str(tmp_path / "ft")]) == 0
    ft = _json_out(capsys)
    assert ft[0]["tag"] == "simple+ppo" and ft[0]["real_interactions"] == 40
    assert RunReport.load(tmp_path / "ft/seed1").tag == "simple+ppo"


def test_resume_via_cli(capsys, tmp_path):
    run = tmp_path / "r"
    assert main(["train-simple", *TINY, "--run-dir", str(run)]) == 0
    first = _json_out(capsys)
    assert main(["train-simple", *TINY, "--run-dir", str(run), "--resume"]) == 0
    again = _json_out(capsys)
    assert again == first


def test_locked_run_dir_refused(tmp_path):
    d = tmp_path / "runs/seed1"
    with run_lock(d):
        assert main(["train-simple", *TINY, "--run-dir", str(tmp_path / "runs")]) == 3
    assert not (d / ".lock").exists()


def test_world_model_command(capsys, tmp_path):
    assert main(["train-world-model", "--preset", "ablation-deterministic", "--steps", "2",
                 "--interactions", "60", "--set", "model.batch_size=4",
                 "--run-dir", str(tmp_path / "wm")]) == 0
    res = _json_out(capsys)[0]
    assert 0 <= res["one_step_accuracy"] <= 1
    assert (tmp_path / "wm/seed1/world_model.bin").exists()


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "simplerl", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "train-simple" in proc.stdout
