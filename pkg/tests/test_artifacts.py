"""
Tests for artifact emission, the validate suite checks and the calibration
helpers.
"""
import json
import sys

import numpy as np
import pandas as pd
import pytest

from voltreach.artifacts import MANIFEST_NAME, ArtifactWriter, read_manifest, sha256_file
from voltreach.calibration import CalibrationReport, Timeline, _bisect, calibrated_toml
from voltreach.config import build_config
from voltreach.models import GridSpec, Td3Config, ToyConfig
from voltreach.neural import Mlp, save_checkpoint
from voltreach.validation import (check_adam, check_checkpoint, check_decomposition, check_dp_coverage,
                                  check_gradients, check_return_equivalence, sine_policy)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def test_writer_checksums_and_manifest(tmp_path):
    writer = ArtifactWriter(tmp_path, "run-1")
    csv_path = writer.write_csv("table.csv", pd.DataFrame({"a": [1.0, 2.5], "b": [3, 4]}))
    writer.write_json("report.json", {"ok": True})
    with writer.timed("work"):
        pass

    manifest = writer.write_manifest("evaluate", "abc", 7, "1.0.0", config={"run": {"seed": 7}})

    assert set(manifest.artifacts) == {"table.csv", "report.json"}
    assert manifest.artifacts["table.csv"] == sha256_file(csv_path)
    assert "work" in manifest.timings
    loaded = read_manifest(tmp_path / MANIFEST_NAME)
    assert loaded == manifest


def test_csv_output_is_deterministic(tmp_path):
    frame = pd.DataFrame({"x": [0.1, 1.0 / 3.0], "y": ["p", "q"]})
    a = ArtifactWriter(tmp_path / "a", "r").write_csv("f.csv", frame)
    b = ArtifactWriter(tmp_path / "b", "r").write_csv("f.csv", frame)

    assert a.read_bytes() == b.read_bytes()
    assert a.read_text(encoding="utf-8").splitlines()[0] == "x,y"


def test_register_external_file(tmp_path):
    writer = ArtifactWriter(tmp_path, "r")
    ckpt = tmp_path / "checkpoints" / "final.ckpt"
    save_checkpoint(ckpt, {"actor": Mlp.init([2, 3, 1], np.random.default_rng(0))}, "h")

    digest = writer.register(ckpt)
    assert writer.checksums[str(ckpt.relative_to(tmp_path))] == digest


def test_manifest_json_has_timestamp(tmp_path):
    writer = ArtifactWriter(tmp_path, "r")
    writer.write_manifest("simulate", "h", 0, "1.0.0")

    data = json.loads((tmp_path / MANIFEST_NAME).read_text(encoding="utf-8"))
    assert "created_at" in data
    assert data["command"] == "simulate"


# ---------------------------------------------------------------------------
# Validation checks
# ---------------------------------------------------------------------------

def test_sine_policy_is_bounded_and_deterministic():
    obs = np.array([0.3, -0.7])
    assert sine_policy(obs) == sine_policy(obs.copy())
    assert -1.0 <= sine_policy(obs) <= 1.0


def test_return_equivalence_check():
    result = check_return_equivalence(ToyConfig(), episodes=100)

    assert result.passed
    assert result.detail["mismatches"] == 0


def test_decomposition_check():
    result = check_decomposition(ToyConfig(), n=500)

    assert result.passed
    assert result.detail["counted"] == result.detail["failures"]


def test_gradient_and_adam_checks():
    assert check_gradients(nets=2).passed
    assert check_adam().passed


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_default_size(seed):
    result = check_gradients(nets=10, seed=seed)

    assert result.passed, result.detail


def test_dp_coverage_check():
    assert check_dp_coverage(ToyConfig(), GridSpec()).passed

    bad = check_dp_coverage(ToyConfig(), GridSpec(z_min=0.5))
    assert not bad.passed
    assert "error" in bad.detail


def test_checkpoint_check(tmp_path):
    learner = Td3Config(hidden=[8])
    assert check_checkpoint(None, learner).passed

    path = tmp_path / "final.ckpt"
    save_checkpoint(path, {"actor": Mlp.init([2, 3, 1], np.random.default_rng(0))}, "h")
    assert check_checkpoint(str(path), learner).passed

    path.write_text("garbage\n", encoding="utf-8")
    assert not check_checkpoint(str(path), learner).passed


# ---------------------------------------------------------------------------
# Calibration helpers
# ---------------------------------------------------------------------------

def test_bisect_finds_window():
    """trial says 'too small' below 2.3 and 'too large' above 2.6"""
    def trial(x):
        if x < 2.3:
            return -1
        return 0 if x <= 2.6 else 1

    x, found = _bisect(trial, 1.8, 3.2, max_iter=12)
    assert found
    assert 2.3 <= x <= 2.6


def test_bisect_reports_failure():
    x, found = _bisect(lambda x: 1, 0.0, 1.0, max_iter=5)

    assert not found
    assert x == pytest.approx(1.0 / 32.0)


def test_calibrated_toml_merges_into_config():
    tl = Timeline(trip=10.0, first_tap=40.0, oxl_activation=95.0, collapse=310.0,
                  mechanism="GeneratorLoss", tap_moves=8)
    report = CalibrationReport(ifd_limit=2.35, p_g_mw=470.5, timeline=tl, oxl_ok=True, collapse_ok=True)

    config = build_config(tomllib.loads(calibrated_toml(report)))
    assert config.scenario.p_g_mw == 470.5
    assert config.scenario.exciter.ifd_limit == 2.35
    assert report.as_dict()["ok"] is True
    assert tl.after_trip(tl.oxl_activation) == 85.0
    assert tl.after_trip(None) is None
