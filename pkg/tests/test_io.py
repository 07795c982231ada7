import numpy as np
import pytest

from mecasa.backbone import BackboneConfig, MecasaNet
from mecasa.checkpoint import load_backbone, load_features, load_fusion, save_backbone, save_features, save_fusion
from mecasa.fusion import FusionConfig, FusionNet
from mecasa.io import MAGIC, FormatError, read_container, read_header, read_json, write_container, write_json


def test_container_round_trip(tmp_path, rng):
    tensors = [("a", rng.standard_normal((2, 3))), ("scalar", np.array(4.0)), ("empty", np.zeros((0, 5)))]
    write_container(tmp_path / "x.bin", {"kind": "demo", "note": "hi"}, tensors)
    header, got = read_container(tmp_path / "x.bin")
    assert list(got) == ["a", "scalar", "empty"]
    for name, arr in tensors:
        assert got[name].shape == arr.shape and got[name].tobytes() == arr.tobytes()
    assert header["kind"] == "demo" and read_header(tmp_path / "x.bin")["note"] == "hi"
    assert not (tmp_path / "x.bin.tmp").exists()


def test_payload_layout_is_little_endian_float64(tmp_path):
    write_container(tmp_path / "x.bin", {}, [("v", np.array([1.0, -2.5]))])
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw.startswith(MAGIC)
    assert raw[-16:] == np.array([1.0, -2.5], dtype="<f8").tobytes()


def test_writes_are_deterministic(tmp_path, rng):
    t = [("w", rng.standard_normal(7))]
    write_container(tmp_path / "a", {"z": 1, "a": 2}, t)
    write_container(tmp_path / "b", {"a": 2, "z": 1}, t)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corruption_detected(tmp_path, rng):
    p = tmp_path / "x.bin"
    write_container(p, {}, [("w", rng.standard_normal(10))])
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError, match="declares"):
        read_container(p)
    p.write_bytes(b"NOTMAGIC" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        read_container(p)
    with pytest.raises(FileNotFoundError, match="missing artifact"):
        read_container(tmp_path / "nope")


def test_json_helpers(tmp_path):
    write_json(tmp_path / "d" / "r.json", {"b": 1, "a": [1, 2]})
    assert (tmp_path / "d" / "r.json").read_text().index('"a"') < (tmp_path / "d" / "r.json").read_text().index('"b"')
    assert read_json(tmp_path / "d" / "r.json") == {"a": [1, 2], "b": 1}
    with pytest.raises(FileNotFoundError, match="missing artifact"):
        read_json(tmp_path / "none.json")


def test_backbone_checkpoint_round_trip(tmp_path, rng):
    net = MecasaNet(BackboneConfig(21, 128, (8, 16), (1, 2), mlp_ratio=1.5), seed=4)
    stats = (rng.standard_normal(21), rng.uniform(1, 2, 21))
    save_backbone(tmp_path / "m.ckpt", net, stats, {"fold": 3})
    back, bstats, meta = load_backbone(tmp_path / "m.ckpt")
    assert back.config == net.config and meta == {"fold": 3}
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    assert all(np.array_equal(a, b) for a, b in zip(stats, bstats))
    x = rng.standard_normal((2, 1, 21, 128))
    assert np.array_equal(net.features(x), back.features(x))


def test_backbone_checkpoint_without_stats(tmp_path):
    save_backbone(tmp_path / "m.ckpt", MecasaNet(BackboneConfig(8, 8, (4,), (1,)), seed=0))
    assert load_backbone(tmp_path / "m.ckpt")[1] is None


def test_checkpoint_kind_is_checked(tmp_path, rng):
    save_features(tmp_path / "f.feat", rng.standard_normal((3, 4)), [0, 1, 0], "eeg", "train")
    with pytest.raises(FormatError, match="not a backbone"):
        load_backbone(tmp_path / "f.feat")
    with pytest.raises(FormatError, match="not a fusion"):
        load_fusion(tmp_path / "f.feat")


def test_fusion_checkpoint_round_trip(tmp_path, rng):
    cfg = FusionConfig(4, 6, hidden=5)
    net = FusionNet(cfg, seed=2, feature_stats=(rng.standard_normal(10), rng.uniform(1, 2, 10)))
    save_fusion(tmp_path / "f.ckpt", net, {"seed": 2})
    back, meta = load_fusion(tmp_path / "f.ckpt")
    fe, ff = rng.standard_normal((3, 4)), rng.standard_normal((3, 6))
    assert np.array_equal(net.predict_proba(fe, ff), back.predict_proba(fe, ff)) and meta == {"seed": 2}


def test_feature_cache_round_trip(tmp_path, rng):
    f = rng.standard_normal((5, 16))
    save_features(tmp_path / "c.feat", f, [1, 0, 1, 1, 0], "fnirs", "val")
    got, labels, header = load_features(tmp_path / "c.feat")
    assert np.array_equal(got, f) and labels.tolist() == [1, 0, 1, 1, 0] and labels.dtype == np.int64
    assert (header["modality"], header["split"], header["n_epochs"], header["feature_dim"]) == ("fnirs", "val", 5, 16)
