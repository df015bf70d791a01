import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from robust_saliency import cli
from robust_saliency.attack import AttackResult
from robust_saliency.cli import ExperimentConfig, main, read_pgm, write_pgm
from robust_saliency.nn import load_model

BLOBS = """
dataset = blobs
blob_dims = 4
hidden = 16
epochs = 20
k = 2
q = 64
inputs = 4
"""

DIGITS = """
dataset = digits
hidden = 16
epochs = 3
k = 8
q = 1024
inputs = 2
transform = sparsified, scaled
"""


def write_config(tmp_path, text, **extra):
    path = tmp_path / "exp.cfg"
    path.write_text(text + "".join(f"{k} = {v}\n" for k, v in extra.items()))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def blobs_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    cfg = write_config(root, BLOBS)
    assert main(["train", "--config", cfg, "--out", str(root / "out"), "--quiet"]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def digits_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("digits")
    cfg = write_config(root, DIGITS)
    out = str(root / "out")
    assert main(["train", "--config", cfg, "--out", out, "--quiet"]) == 0
    assert main(["certify", "--config", cfg, "--out", out, "--quiet"]) == 0
    return root / "out"


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig.load(None)
        assert cfg.seed == 0 and cfg.num("k", int) == 16

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValueError, match="unknown keys"):
            ExperimentConfig.load(write_config(tmp_path, "bogus = 1\n"))

    def test_margin_from_config(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, "q = 50\np = 0.95\n"))
        assert cfg.certificate_params(150528).c == pytest.approx(0.3951, abs=5e-4)

    def test_seed_override(self, tmp_path):
        assert ExperimentConfig.load(write_config(tmp_path, "seed = 3\n"), seed=9).seed == 9


class TestTrain:
    def test_blobs(self, blobs_run):
        root, _ = blobs_run
        rows = read_csv(root / "out" / "metrics.csv")
        assert len(rows) == 20 and float(rows[-1]["accuracy"]) >= 0.99
        manifest = json.loads((root / "out" / "manifest_train.json").read_text())
        assert manifest["csv_version"] == 1 and "model.tmdl" in manifest["files"]

    def test_rerun_is_byte_identical(self, blobs_run, tmp_path):
        root, cfg = blobs_run
        assert main(["train", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
        assert (tmp_path / "model.tmdl").read_bytes() == (root / "out" / "model.tmdl").read_bytes()

    def test_seed_changes_model(self, blobs_run, tmp_path):
        root, cfg = blobs_run
        assert main(["train", "--config", cfg, "--out", str(tmp_path), "--seed", "1", "--quiet"]) == 0
        assert (tmp_path / "model.tmdl").read_bytes() != (root / "out" / "model.tmdl").read_bytes()

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "dataset = idx\ntrain_images = /nonexistent/x.idx\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err


class TestCertify:
    def test_reports_match_schema(self, digits_run):
        schema = json.loads(resources.files("robust_saliency").joinpath(
            "schemas/certificate_report.schema.json").read_text())
        reports = sorted((digits_run / "reports").glob("*.json"))
        assert len(reports) == 4
        for path in reports:
            rep = json.loads(path.read_text())
            jsonschema.validate(rep, schema)
            assert 0 <= rep["certificate"]["r_cert"] <= 8
            assert len(rep["smoothed_map"]) == 64

    def test_summaries(self, digits_run):
        rows = read_csv(digits_run / "summary_sparsified.csv")
        assert [r["input_id"] for r in rows] == ["0", "1"]
        assert all(r["median_rank_bound"] != "" for r in rows)
        assert all(r["median_rank_bound"] == "" for r in read_csv(digits_run / "summary_scaled.csv"))
        pct = read_csv(digits_run / "percentiles.csv")
        assert [r["transform"] for r in pct] == ["sparsified(tau=0.25)", "scaled"]
        assert set(pct[0]) == {"transform", "K", "inputs", "p48", "p60", "p72"}

    def test_images(self, digits_run):
        img = read_pgm(digits_run / "images" / "sparsified_input00000.pgm")
        assert img.shape == (8, 8) and 0 <= img.min() and img.max() <= 1
        assert read_pgm(digits_run / "images" / "input00001.pgm").shape == (8, 8)

    def test_missing_model(self, tmp_path):
        cfg = write_config(tmp_path, DIGITS)
        assert main(["certify", "--config", cfg, "--out", str(tmp_path / "none"), "--quiet"]) == 2

    def test_k_out_of_range(self, blobs_run, tmp_path):
        root, _ = blobs_run
        cfg = write_config(tmp_path, BLOBS.replace("k = 2", "k = 5"), model=root / "out" / "model.tmdl")
        assert main(["certify", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 2


class TestAttack:
    def test_zero_radius_keeps_overlap(self, blobs_run, tmp_path):
        root, _ = blobs_run
        cfg = write_config(tmp_path, BLOBS, model=root / "out" / "model.tmdl", rho="0",
                           transform="scaled", attack_q="8", attack_iters="2", attack_restarts="1")
        assert main(["attack", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
        rows = read_csv(tmp_path / "attack_scaled_smoothed.csv")
        assert len(rows) == 4 and all(float(r["normalized_overlap"]) == 1.0 for r in rows)
        data = np.load(tmp_path / "attack_scaled_smoothed_inputs.npz")
        assert data["adversarial"].shape == (4, 4)

    def test_unsmoothed_rho_list(self, blobs_run, tmp_path):
        root, _ = blobs_run
        cfg = write_config(tmp_path, BLOBS, model=root / "out" / "model.tmdl", rho="0.1, 0.5",
                           transform="quadratic", smoothed="false", attack_iters="3", attack_restarts="2")
        assert main(["attack", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
        summary = read_csv(tmp_path / "attack_summary.csv")
        assert [r["rho"] for r in summary] == ["0.1", "0.5"]
        for r in read_csv(tmp_path / "attack_quadratic.csv"):
            assert r["attack_failed"] == "1" or 0 <= float(r["normalized_overlap"]) <= 1

    def test_failed_attack_row(self, blobs_run, tmp_path, monkeypatch):
        root, _ = blobs_run
        monkeypatch.setattr(cli, "l2_topk_attack", lambda *a, **kw: AttackResult(None, float("nan"), 0, 0))
        cfg = write_config(tmp_path, BLOBS.replace("inputs = 4", "inputs = 1"),
                           model=root / "out" / "model.tmdl", transform="scaled", smoothed="false")
        assert main(["attack", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
        row = read_csv(tmp_path / "attack_scaled.csv")[0]
        assert row["attack_failed"] == "1" and row["overlap_after"] == ""
        assert float(read_csv(tmp_path / "attack_summary.csv")[0]["mean_normalized_overlap"]) == 0.0

    def test_sparsified_rejected(self, blobs_run, tmp_path, capsys):
        root, _ = blobs_run
        cfg = write_config(tmp_path, BLOBS, model=root / "out" / "model.tmdl", transform="sparsified")
        assert main(["attack", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "relaxed" in capsys.readouterr().err


class TestVerify:
    def test_passes(self, capsys):
        assert main(["verify", "--quiet"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 4

    def test_vacuous_margin_is_info(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "verify_q = 1\nverify_suites = hoeffding\n")
        assert main(["verify", "--config", cfg]) == 0
        assert "[INFO] hoeffding" in capsys.readouterr().out


def test_usage_errors():
    assert main(["bogus"]) == 2
    assert main([]) == 2


def test_pgm_round_trip(tmp_path):
    values = np.random.default_rng(0).random(12)
    write_pgm(tmp_path / "a.pgm", values, (3, 4))
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm").ravel(), values, atol=0.5 / 255 + 1e-12)


def test_checkpoint_loads(blobs_run):
    root, _ = blobs_run
    model = load_model(root / "out" / "model.tmdl")
    assert model.n_inputs == 4
