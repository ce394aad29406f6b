"""
End-to-end tests of the command-line entry point: exit codes, artifacts and
the run manifest.
"""
import json

import pandas as pd
import pytest

from voltreach.artifacts import MANIFEST_NAME, read_manifest
from voltreach.main import (EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, build_parser, main, overrides_from_args)

TINY_TOY = """
[toy]
z_upper = 5.0

[learner]
hidden = [8, 8]
batch_size = 32
actor_lr = 1e-3
critic_lr = 1e-3

[schedule]
env_steps = 200
learning_starts = 100
eval_every = 100
eval_episodes = 5
checkpoint_every = 100

[oracle]
n_per_cell = 50
eval_grid = 3

[oracle.grid]
n_z = 226
n_u = 5

[run]
env = "toy"
"""

SHORT_SCENARIO = """
[scenario]
horizon = 20.0
h_int = 0.05
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("VOLTREACH_OUT_DIR", "VOLTREACH_SEED", "VOLTREACH_WORKERS"):
        monkeypatch.delenv(name, raising=False)


def write_config(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_overrides_from_flags():
    args = build_parser().parse_args(["--seed", "4", "--out", "o", "mc", "--env", "toy", "--n", "10"])
    tree = overrides_from_args(args)

    assert tree["run"] == {"seed": 4, "out_dir": "o", "env": "toy"}
    assert tree["oracle"] == {"n_per_cell": 10}


def test_unknown_config_key_exits_2(tmp_path):
    path = write_config(tmp_path, "[run]\nseeed = 1\n")
    assert main(["--config", path, "--out", str(tmp_path / "out"), "validate"]) == EXIT_CONFIG


def test_missing_config_file_exits_2(tmp_path):
    assert main(["--config", str(tmp_path / "nope.toml"), "simulate"]) == EXIT_CONFIG


def test_missing_checkpoint_exits_5(tmp_path):
    path = write_config(tmp_path, TINY_TOY)
    code = main(["--config", path, "--out", str(tmp_path / "out"), "evaluate",
                 "--checkpoint", str(tmp_path / "absent.ckpt")])
    assert code == EXIT_CHECKPOINT


def test_corrupt_checkpoint_exits_5(tmp_path):
    path = write_config(tmp_path, TINY_TOY)
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_text("not a checkpoint\n", encoding="utf-8")

    code = main(["--config", path, "--out", str(tmp_path / "out"), "mc", "--checkpoint", str(ckpt)])
    assert code == EXIT_CHECKPOINT


def test_simulate_writes_trajectory(tmp_path):
    path = write_config(tmp_path, SHORT_SCENARIO)
    out = tmp_path / "sim"

    assert main(["--config", path, "--out", str(out), "simulate"]) == EXIT_OK
    traj = pd.read_csv(out / "trajectory.csv")
    events = pd.read_csv(out / "events.csv")
    assert traj["t"].iloc[-1] == pytest.approx(20.0)
    assert "trip" in set(events["kind"])
    manifest = read_manifest(out / MANIFEST_NAME)
    assert manifest.command == "simulate"
    assert set(manifest.artifacts) == {"trajectory.csv", "events.csv"}


def test_toy_train_then_evaluate(tmp_path):
    """Tiny toy run: train writes checkpoints and the curve; evaluate reads the checkpoint back"""
    path = write_config(tmp_path, TINY_TOY)
    out = tmp_path / "train"

    assert main(["--config", path, "--out", str(out), "--seed", "3", "train"]) == EXIT_OK
    for name in ("final.ckpt", "resume.pkl", "learning_curve.csv", "comparison.json", MANIFEST_NAME):
        assert (out / name).exists(), name
    curve = pd.read_csv(out / "learning_curve.csv")
    assert list(curve["step"]) == [100, 200]
    manifest = read_manifest(out / MANIFEST_NAME)
    assert manifest.seed == 3
    assert "final.ckpt" in manifest.artifacts
    assert "checkpoints/step_00000100.ckpt" in manifest.artifacts

    ev_out = tmp_path / "eval"
    code = main(["--config", path, "--out", str(ev_out), "evaluate", "--checkpoint", str(out / "final.ckpt")])
    assert code == EXIT_OK
    baseline = pd.read_csv(ev_out / "risk_baseline.csv")
    assert len(baseline) == 3
    assert {"risk_lower", "risk_upper"} <= set(baseline.columns)
    assert (ev_out / "risk_policy.csv").exists()
    comparison = json.loads((ev_out / "comparison.json").read_text(encoding="utf-8"))
    assert comparison["n_states"] > 0


def test_toy_train_in_segments(tmp_path):
    """Stop after 100 steps, resume to the end of the schedule"""
    path = write_config(tmp_path, TINY_TOY)
    first, second = tmp_path / "first", tmp_path / "second"

    assert main(["--config", path, "--out", str(first), "train", "--until", "100"]) == EXIT_OK
    assert list(pd.read_csv(first / "learning_curve.csv")["step"]) == [100]

    code = main(["--config", path, "--out", str(second), "train", "--resume", str(first / "resume.pkl")])
    assert code == EXIT_OK
    assert list(pd.read_csv(second / "learning_curve.csv")["step"]) == [100, 200]


def test_toy_mc(tmp_path):
    path = write_config(tmp_path, TINY_TOY)
    out = tmp_path / "mc"

    assert main(["--config", path, "--out", str(out), "mc", "--n", "20"]) == EXIT_OK
    frame = pd.read_csv(out / "risk_surface.csv")
    assert (frame["n"] == 20).all()
    assert frame["risk_total"].between(0.0, 1.0).all()
