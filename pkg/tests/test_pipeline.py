import json

import numpy as np
import pytest

from depthfuse import pipeline
from depthfuse.config import Config
from depthfuse.distill import DistillError
from depthfuse.fileio import file_hash, read_field
from depthfuse.pipeline import STAGES, StageError, injector_dataset, run_pipeline
from depthfuse.numerics import SeededRng
from depthfuse.shapes import ShapeSpec

TINY = Config().replace(image_size=8, steps_per_ray=8, resolution=6, iterations=3, embed_steps=4,
                        cloud_points=200, eval_frames=4, world_bank_count=8)
SPEC = ShapeSpec("asymmetric-cone")


def test_pipeline_writes_artifacts_and_complete_manifest(tmp_path):
    res = run_pipeline(TINY.prompt_id, SPEC, TINY, tmp_path / "run", seed=3)
    out = tmp_path / "run"
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "complete" and m["error"] is None
    assert [s["name"] for s in m["stages"]] == list(STAGES)
    assert {s["name"]: s["status"] for s in m["stages"]}["adapters"] == "skipped"
    assert m["seed"] == 3 and m["mode"] == "fused"
    assert len(m["loss_proxy"]) == 3
    for name, digest in m["hashes"].items():
        assert file_hash(out / name) == digest
    assert len([n for n in m["hashes"] if n.startswith("turntable/")]) == 4
    back = read_field(out / "field.ckpt")
    assert np.array_equal(back.density, res.field.density)


def test_manifest_alone_reproduces_run(tmp_path):
    run_pipeline(TINY.prompt_id, SPEC, TINY, tmp_path / "a", seed=5)
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    cfg = Config(dict(m["config"]))
    run_pipeline(m["prompt_id"], ShapeSpec(m["shape"]), cfg, tmp_path / "b", seed=m["seed"], mode=m["mode"])
    m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert m2["hashes"] == m["hashes"]
    assert m2["checksums"] == m["checksums"]
    assert m2["loss_proxy"] == m["loss_proxy"]


def test_baseline_and_fused_differ_only_in_mode(tmp_path):
    a = run_pipeline(TINY.prompt_id, SPEC, TINY, None, seed=1, mode="baseline")
    b = run_pipeline(TINY.prompt_id, SPEC, TINY, None, seed=1, mode="fused")
    assert a.manifest.mode == "baseline"
    assert np.array_equal(a.code.embedding, b.code.embedding)
    assert not np.array_equal(a.field.density, b.field.density)


def test_supplied_embedding_skips_inversion():
    e = np.arange(TINY.embed_dim, dtype=float)
    res = run_pipeline(TINY.prompt_id, SPEC, TINY, None, embedding=e)
    assert np.array_equal(res.code.embedding, e)
    assert "supplied" in res.manifest.stages[1]["notes"]["embedding"]


def test_stage_failure_is_named_and_recorded(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("no points today")

    monkeypatch.setattr(pipeline, "coarse_cloud", broken)
    with pytest.raises(StageError) as info:
        run_pipeline(TINY.prompt_id, SPEC, TINY, tmp_path)
    assert info.value.stage == "cloud"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["status"] == "failed"
    assert m["error"] == {"stage": "cloud", "message": "no points today"}
    assert [s["status"] for s in m["stages"]] == ["done", "done", "failed"]


def test_distill_failure_records_iteration(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        err = DistillError("non-finite gradient at iteration 1", 1)
        err.record = {"losses": [0.5]}
        raise err

    monkeypatch.setattr(pipeline, "distill", diverge)
    with pytest.raises(StageError) as info:
        run_pipeline(TINY.prompt_id, SPEC, TINY, tmp_path)
    assert info.value.stage == "distill"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["error"]["iteration"] == 1
    assert m["loss_proxy"] == [0.5]


def test_decisions_recorded():
    d = pipeline.decision_values(TINY, 0)
    assert d["t_range_steps"] == [20, 980]
    assert d["stream_keys"] == pipeline._STREAM


@pytest.mark.parametrize("fraction,kinds", [(0.0, {"sparse"}), (1.0, {"dense"})])
def test_injector_dataset_condition_kinds(fraction, kinds):
    cfg = TINY.replace(dense_fraction=fraction)
    data = injector_dataset(["composite", "tagged-sphere"], cfg.prompt_id, cfg, SeededRng(0), views=6)
    assert {ex.kind for ex in data} == kinds
    assert all(ex.image.shape == (8, 8, 3) and ex.condition.shape == (8, 8) for ex in data)


def test_injector_dataset_needs_families():
    with pytest.raises(ValueError):
        injector_dataset([], TINY.prompt_id, TINY, SeededRng(0), views=2)
