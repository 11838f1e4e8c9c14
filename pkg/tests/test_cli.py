import json

import numpy as np
import pytest

from depthfuse.cli import main
from depthfuse.config import Config
from depthfuse.fileio import file_hash, read_model

TINY = ("image_size = 8\nsteps_per_ray = 8\nresolution = 6\niterations = 3\nembed_steps = 4\n"
        "cloud_points = 200\neval_frames = 4\nworld_bank_count = 8\n")
MLP = TINY + ("model = mlp-denoiser\nhidden = 8\nprior_rank = 4\ninjector_views = 4\n"
              "pretrain_steps = 2\ninjector_steps = 2\ninjector_batch = 2\nadapter_steps = 2\n")


@pytest.fixture
def cfg_file(tmp_path):
    def make(text, name="run.cfg"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return make


def test_distill_two_families_two_directories(tmp_path, cfg_file):
    path = cfg_file(TINY + "shapes = composite, tagged-sphere\n")
    assert main(["distill", "--config", path, "--out", str(tmp_path / "o"), "--seed", "2"]) == 0
    for family in ("composite", "tagged-sphere"):
        d = tmp_path / "o" / family
        m = json.loads((d / "manifest.json").read_text())
        assert m["shape"] == family and m["status"] == "complete"
        assert m["seed"] == 2 and m["seed_source"] == "cli"
        for name in ("field.ckpt", "losses.csv", "cloud.ply", "reference.ppm", "embedding.npy",
                     "turntable/frame_000.ppm"):
            assert (d / name).is_file()


def test_rerun_from_manifest_is_bit_identical(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("SDS_SANDBOX_SEED", "6")
    assert main(["distill", "--config", cfg_file(TINY), "--out", str(tmp_path / "a")]) == 0
    m = json.loads((tmp_path / "a" / "asymmetric-cone" / "manifest.json").read_text())
    assert (m["seed"], m["seed_source"]) == (6, "env")
    monkeypatch.delenv("SDS_SANDBOX_SEED")
    again = cfg_file(Config(dict(m["config"])).to_text(), "again.cfg")
    assert main(["distill", "--config", again, "--out", str(tmp_path / "b"), "--seed", str(m["seed"]),
                 "--mode", m["mode"]]) == 0
    m2 = json.loads((tmp_path / "b" / "asymmetric-cone" / "manifest.json").read_text())
    assert m2["hashes"] == m["hashes"]


def test_lambda_lora_recorded_in_manifest(tmp_path, cfg_file):
    path = cfg_file(TINY + "[model]\nlambda_lora = 0.3\n")
    assert main(["distill", "--config", path, "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "asymmetric-cone" / "manifest.json").read_text())
    assert m["config"]["lambda_lora"] == 0.3
    assert m["seed_source"] == "default"


def test_bad_config_exit_code_one(tmp_path, cfg_file, capsys):
    path = cfg_file("[distill]\nt_min = 1.5\n")
    assert main(["distill", "--config", path, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "t_min" in err and "line 2" in err


@pytest.mark.parametrize("argv", [[], ["fly"], ["eval"], ["acceptance", "--suite", "nope"],
                                   ["turntable", "--field", "x", "--frames", "zero"]])
def test_usage_errors_exit_one(argv):
    assert main(argv) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "distill" in capsys.readouterr().out


def test_missing_field_is_runtime_failure(tmp_path, capsys):
    assert main(["eval", "--field", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2
    assert "stage load-field" in capsys.readouterr().err


def test_eval_and_turntable_on_distilled_field(tmp_path, cfg_file):
    path = cfg_file(TINY)
    assert main(["distill", "--config", path, "--out", str(tmp_path / "o")]) == 0
    fld = tmp_path / "o" / "asymmetric-cone" / "field.ckpt"
    assert main(["eval", "--field", str(fld), "--config", path, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["frame_count"] == 4 and len(report["azimuths"]) == 4
    assert report["variance"] >= 0.0
    assert (tmp_path / "ev" / "report.csv").read_text().startswith("frame,est_azimuth,adj_diff\n")
    side = json.loads((tmp_path / "ev" / "eval_manifest.json").read_text())
    assert side["status"] == "complete" and side["field_hash"] == file_hash(fld)
    assert main(["turntable", "--field", str(fld), "--config", path, "--frames", "3",
                 "--out", str(tmp_path / "tt")]) == 0
    assert sorted(p.name for p in (tmp_path / "tt").glob("*.ppm")) == [
        "frame_000.ppm", "frame_001.ppm", "frame_002.ppm"]


def test_train_injector_then_distill_with_checkpoint(tmp_path, cfg_file):
    path = cfg_file(MLP)
    assert main(["train-injector", "--config", path, "--out", str(tmp_path / "m")]) == 0
    m = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert m["status"] == "complete" and set(m["checksums"]) == {"theta", "phi", "psi"}
    model = read_model(tmp_path / "m" / "model.ckpt")
    assert model.checksum("theta") == m["checksums"]["theta"]
    args = ["distill", "--config", path, "--out", str(tmp_path / "d"), "--model", str(tmp_path / "m" / "model.ckpt")]
    assert main(args) == 0
    d = json.loads((tmp_path / "d" / "asymmetric-cone" / "manifest.json").read_text())
    stages = {s["name"]: s for s in d["stages"]}
    assert stages["model"]["notes"]["source"] == "provided"
    assert stages["adapters"]["status"] == "done"
    # the checkpoint on disk is untouched by adapter tuning
    assert read_model(tmp_path / "m" / "model.ckpt").checksum("psi") == m["checksums"]["psi"]


def test_distill_with_corrupt_model_fails_in_model_stage(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nothing here")
    assert main(["distill", "--config", cfg_file(TINY), "--out", str(tmp_path), "--model", str(bad)]) == 2
    assert "stage model" in capsys.readouterr().err


def test_optimize_code_writes_embedding(tmp_path, cfg_file):
    assert main(["optimize-code", "--config", cfg_file(TINY), "--out", str(tmp_path)]) == 0
    e = np.load(tmp_path / "embedding.npy")
    assert e.shape == (16,)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert len(m["loss_proxy"]) == 4 and m["status"] == "complete"


def test_acceptance_csv_is_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["acceptance", "--suite", "gradient,sds", "--out", str(tmp_path / d)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS gradient") == 2 and out.count("PASS sds") == 2
    for name in ("gradient.csv", "sds.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
