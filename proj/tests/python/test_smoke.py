import math
from pathlib import Path

import numpy as np
import pytest

import eduvqa

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

MICRO = {
    "frames": 2,
    "height": 2,
    "width": 2,
    "tokens": 3,
    "channels": 4,
    "spatial_experts": 2,
    "temporal_experts": 2,
    "alignment_experts": 2,
    "top_k": 1,
    "joint_top_k": 1,
    "expert_hidden": 6,
    "dtype": "float64",
}


def test_config_and_ablations():
    cfg = eduvqa.default_config()
    assert cfg["channels"] == 16 and cfg["dtype"] == "float32"
    assert eduvqa.ablation_config(1)["fusion"] is False
    assert eduvqa.ablation_config(6)["vanilla_moe"] is True
    with pytest.raises(eduvqa.ConfigError):
        eduvqa.ablation_config(9)
    with pytest.raises(eduvqa.Error):
        eduvqa.Model({"top_k": 99})


def test_model_predicts_every_head():
    model = eduvqa.Model(MICRO, seed=3)
    rng = np.random.default_rng(0)
    out = model.predict(rng.uniform(-1, 1, (2, 2, 2, 4)), rng.uniform(-1, 1, (2, 3, 4)), [1, 0])
    for key in ("spatial", "temporal", "overall_percept", "sentence"):
        assert math.isfinite(out[key])
    assert list(out["word"]) == [1]
    for mix in out["mixtures"]:
        assert len(mix["experts"]) <= 1
        assert sum(mix["weights"]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(eduvqa.ShapeError):
        model.predict(np.zeros((2, 2, 2, 5)), np.zeros((2, 3, 4)))


def test_checkpoint_round_trip(tmp_path):
    model = eduvqa.Model(MICRO, seed=5)
    model.save(tmp_path / "m.ckpt")
    back = eduvqa.load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for name in model.parameter_names():
        assert np.array_equal(back.parameter(name), model.parameter(name))
    (tmp_path / "bad.ckpt").write_bytes(b"EDUX\x01")
    with pytest.raises(eduvqa.FormatError):
        eduvqa.load_checkpoint(tmp_path / "bad.ckpt")


def test_edut_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
    eduvqa.write_tensor(tmp_path / "a.edut", a)
    assert np.array_equal(eduvqa.read_tensor(tmp_path / "a.edut"), a)
    eduvqa.write_tensor(tmp_path / "b.edut", a, dtype="f32")
    assert np.array_equal(eduvqa.read_tensor(tmp_path / "b.edut"), a.astype(np.float32).astype(np.float64))
    (tmp_path / "c.edut").write_bytes(b"EDUT")
    with pytest.raises(eduvqa.TruncationError):
        eduvqa.read_tensor(tmp_path / "c.edut")


def test_metrics_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(1)
    x, y = rng.uniform(1, 5, 50), rng.uniform(1, 5, 50)
    x[10:15] = x[:5]
    assert eduvqa.srcc(x, y) == pytest.approx(stats.spearmanr(x, y)[0], abs=1e-12)
    assert eduvqa.plcc(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)
    assert eduvqa.krcc(x, y) == pytest.approx(stats.kendalltau(x, y)[0], abs=1e-12)
    assert eduvqa.rmse(x, x) == 0.0
    assert eduvqa.krcc([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
    m = eduvqa.compute_metrics(x, x)
    assert m["srcc"] == pytest.approx(1.0) and m["n"] == 50


def test_gmad_pairs():
    a = {"v1": 1.0, "v2": 1.0, "v3": 3.0}
    b = {"v1": 1.0, "v2": 4.0, "v3": 2.0}
    pairs = eduvqa.gmad_pairs(a, b, eps=0.0, top=5)
    assert len(pairs) == 1
    assert (pairs[0]["video_a"], pairs[0]["video_b"]) == ("v1", "v2")
    assert pairs[0]["attacker_delta"] == 3.0


def test_consolidation_fixture():
    report = eduvqa.consolidate_csv(FIXTURES / "ratings16.csv")
    (cell,) = report["cells"]
    assert cell["lambda"] == 2.0
    assert len(cell["excluded"]) == 2
    assert cell["mos"] == 3.0
    flat = eduvqa.consolidate([(f"a{i}", "v", "overall_percept", s) for i, s in enumerate([1, 1, 1, 1, 5])])
    assert flat["cells"][0]["excluded"] == []


def test_synthetic_split_train(tmp_path):
    shape = {"frames": 2, "height": 2, "width": 2, "tokens": 4, "channels": 8}
    assert eduvqa.generate_synthetic(tmp_path, shape, videos=200, noise=0.1) == 200
    records = eduvqa.read_manifest(tmp_path / "manifest.jsonl")
    assert len(records) == 200 and records[0]["tokens"][0] == "[CLS]"
    splits = eduvqa.make_splits(tmp_path / "manifest.jsonl", count=2, out=tmp_path / "splits.json")
    assert len(splits) == 2
    config = dict(shape, spatial_experts=4, temporal_experts=4, alignment_experts=4, expert_hidden=8)
    result = eduvqa.train(
        tmp_path / "manifest.jsonl", tmp_path / "splits.json", 0, config, {"lr0": 3e-3, "epochs": 5}
    )
    assert not result["aborted"]
    assert len(result["log"]) == 5
    assert result["best_val"] > 0.5
    assert isinstance(result["model"], eduvqa.Model)


def test_gradient_check_micro():
    report = eduvqa.gradient_check(MICRO, seed=0)
    assert report["checked"] > 0
    assert report["max_rel_error"] < 1e-4
