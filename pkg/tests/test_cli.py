import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from tastekit.numkit import Rng
from tastekit.reportio import read_json, write_json, write_samples_csv
from tastekit.score_models import IsotropicGaussian


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "tastekit.cli", *args],
                          capture_output=True, text=True)


def digest_dir(d):
    return {str(p.relative_to(d)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(d).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    p = IsotropicGaussian.standard(2)
    write_samples_csv(root / "test.csv", p.sample(100, Rng(1)))
    write_samples_csv(root / "cal.csv", p.sample(300, Rng(2)))
    write_json(root / "score.json",
               {"kind": "isotropic-gaussian", "mean": [0.0, 0.0], "variance": 1.0})
    result = run_cli("train-predictor", "--seed", "5", "--samples", "1500",
                     "--out", str(root / "pred"))
    assert result.returncode == 0, result.stderr
    return root


class TestExitCodes:
    def test_success_is_zero(self, tmp_path):
        result = run_cli("experiment", "--kind", "blindspot", "--seed", "1",
                         "--samples", "500", "--out", str(tmp_path / "b"))
        assert result.returncode == 0
        assert json.loads(result.stdout)["kind"] == "blindspot"

    def test_config_error_is_two(self, tmp_path, data_files):
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--calibration", str(data_files / "cal.csv"),
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--route", "hutchinson:4", "--per-dimension",
                         "--out", str(tmp_path / "x"))
        assert result.returncode == 2
        assert result.stderr.startswith("error: config:")
        assert result.stderr.count("\n") == 1

    def test_data_error_is_three(self, tmp_path, data_files):
        broken = tmp_path / "broken.csv"
        broken.write_text("x0,x1\n1.0,nope\n")
        result = run_cli("score", "--test", str(broken), "--no-baseline",
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--out", str(tmp_path / "y"))
        assert result.returncode == 3
        assert "broken.csv:2" in result.stderr

    def test_bad_noise_std_is_two(self, tmp_path):
        result = run_cli("train-score", "--noise-std", "-0.5",
                         "--out", str(tmp_path / "z"))
        assert result.returncode == 2

    def test_unknown_kind_rejected(self, tmp_path):
        result = run_cli("experiment", "--kind", "frobnicate",
                         "--out", str(tmp_path / "w"))
        assert result.returncode == 2

    def test_help_documents_quantile_convention(self):
        result = run_cli("--help")
        assert result.returncode == 0
        assert "ceil(q*n) - 1" in result.stdout


class TestScoreCommand:
    def test_emits_residuals_and_baseline(self, tmp_path, data_files):
        out = tmp_path / "scored"
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--calibration", str(data_files / "cal.csv"),
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--out", str(out))
        assert result.returncode == 0, result.stderr
        assert (out / "residuals.csv").exists()
        baseline = read_json(out / "baseline.json")
        assert baseline["n_calibration"] == 300
        assert isinstance(baseline["d_f"], float)

    def test_no_baseline_is_raw_passthrough(self, tmp_path, data_files):
        out = tmp_path / "raw"
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--no-baseline",
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--out", str(out))
        assert result.returncode == 0, result.stderr
        rows = (out / "residuals.csv").read_text().splitlines()[1:]
        for row in rows:
            _, raw, adjusted = row.split(",")
            assert raw == adjusted
        assert read_json(out / "baseline.json")["d_f"] == 0.0

    def test_alpha_records_threshold(self, tmp_path, data_files):
        out = tmp_path / "thresh"
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--calibration", str(data_files / "cal.csv"),
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--alpha", "0.1", "--out", str(out))
        assert result.returncode == 0, result.stderr
        baseline = read_json(out / "baseline.json")
        assert baseline["alpha"] == 0.1
        assert baseline["mode"] == "absolute"
        assert baseline["threshold"] > 0

    def test_per_dimension_csv(self, tmp_path, data_files):
        out = tmp_path / "perdim"
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--calibration", str(data_files / "cal.csv"),
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--per-dimension", "--out", str(out))
        assert result.returncode == 0, result.stderr
        lines = (out / "per_dimension.csv").read_text().splitlines()
        assert lines[0] == "r0,r1"
        assert len(lines) == 101

    def test_creates_missing_output_dir(self, tmp_path, data_files):
        out = tmp_path / "deep" / "nested" / "dir"
        result = run_cli("score", "--test", str(data_files / "test.csv"),
                         "--no-baseline",
                         "--predictor", str(data_files / "pred" / "predictor.json"),
                         "--score", str(data_files / "score.json"),
                         "--out", str(out))
        assert result.returncode == 0
        assert (out / "residuals.csv").exists()


class TestDeterminism:
    def test_checkpoint_bytes_reproduce(self, tmp_path):
        out = tmp_path / "ck"
        args = ("train-predictor", "--seed", "9", "--samples", "1200",
                "--out", str(out))
        assert run_cli(*args).returncode == 0
        first = digest_dir(out)
        assert run_cli(*args).returncode == 0
        assert digest_dir(out) == first

    def test_emitted_config_reproduces_bundle(self, tmp_path):
        out = tmp_path / "exp"
        result = run_cli("experiment", "--kind", "tilt", "--seed", "4",
                         "--samples", "3000", "--out", str(out))
        assert result.returncode == 0, result.stderr
        first = digest_dir(out)
        rerun = run_cli("experiment", "--config", str(out / "config.json"))
        assert rerun.returncode == 0, rerun.stderr
        assert digest_dir(out) == first
