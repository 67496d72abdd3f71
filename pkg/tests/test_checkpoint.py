import json

import numpy as np
import pytest

from elastiserve.checkpoint import (
    BLOB,
    MANIFEST,
    FormatError,
    UnsupportedVersionError,
    load_checkpoint,
    manifest_digest,
    save_checkpoint,
)
from elastiserve.model import ModelConfig, TransformerLM
from elastiserve.pipeline import dense_checkpoint
from elastiserve.runtime import ElasticRuntime


@pytest.fixture
def saved(tmp_path, tiny_ckpt):
    return save_checkpoint(tiny_ckpt, tmp_path / "ck")


def test_round_trip_buffers_bitwise(saved, tiny_ckpt):
    back = load_checkpoint(saved)
    for (na, a), (nb, b) in zip(tiny_ckpt.params.named(), back.params.named()):
        assert na == nb and a.dtype == b.dtype and np.array_equal(a, b)
    assert back.config == tiny_ckpt.config
    assert back.levels == tiny_ckpt.levels
    assert (back.head_order == tiny_ckpt.head_order).all()
    assert (back.neuron_order == tiny_ckpt.neuron_order).all()
    assert back.anchors.layers == tiny_ckpt.anchors.layers
    assert sorted(back.adapters) == sorted(tiny_ckpt.adapters)
    for key, layers in tiny_ckpt.adapters.items():
        for la, lb in zip(layers, back.adapters[key]):
            assert la.keys() == lb.keys()
            assert all(np.array_equal(la[k][0], lb[k][0]) and np.array_equal(la[k][1], lb[k][1]) for k in la)


def test_round_trip_logits_bitwise_at_every_level(saved, tiny_ckpt):
    back = load_checkpoint(saved)
    prompt = [1, 10, 40, 2, 10]
    a, b = ElasticRuntime(tiny_ckpt), ElasticRuntime(back)
    for lvl in tiny_ckpt.levels:
        a.switch_level(lvl.key)
        b.switch_level(lvl.key)
        with a.request() as va, b.request() as vb:
            la = a.prefill(prompt, va, 8)[0][0]
            lb = b.prefill(prompt, vb, 8)[0][0]
        assert np.array_equal(la, lb)


def test_blob_is_little_endian_float32(saved, tiny_ckpt):
    m = json.loads((saved / MANIFEST).read_text())
    first = m["tensors"][0]
    raw = (saved / BLOB).read_bytes()
    n = int(np.prod(first["shape"]))
    arr = np.frombuffer(raw, dtype="<f4", count=n, offset=first["offset"]).reshape(first["shape"])
    assert np.array_equal(arr, dict(tiny_ckpt.params.named())[first["name"]])


def test_corrupt_manifest_digest(saved):
    m = json.loads((saved / MANIFEST).read_text())
    d = m["digest"]
    m["digest"] = ("0" if d[0] != "0" else "1") + d[1:]
    (saved / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(FormatError, match="digest"):
        load_checkpoint(saved)


def test_edited_manifest_field_detected(saved):
    m = json.loads((saved / MANIFEST).read_text())
    m["anchors"] = [0]
    (saved / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(FormatError):
        load_checkpoint(saved)


def test_any_single_blob_byte_flip_detected(saved):
    raw = bytearray((saved / BLOB).read_bytes())
    rng = np.random.default_rng(0)
    for pos in rng.integers(0, len(raw), size=5):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        (saved / BLOB).write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            load_checkpoint(saved)


def test_truncated_blob(saved):
    raw = (saved / BLOB).read_bytes()
    (saved / BLOB).write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(saved)


def test_unknown_version(saved):
    m = json.loads((saved / MANIFEST).read_text())
    m["format_version"] = 99
    m["digest"] = manifest_digest(m)
    (saved / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(saved)


def test_inconsistent_offsets(saved):
    m = json.loads((saved / MANIFEST).read_text())
    m["tensors"][1]["offset"] += 4
    m["digest"] = manifest_digest(m)
    (saved / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(saved)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / MANIFEST).write_text("{}")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing")


def test_float64_rejected(tmp_path):
    m = TransformerLM.create(ModelConfig(1, 2, 4, 4, 10, dtype="float64"))
    with pytest.raises(FormatError):
        save_checkpoint(dense_checkpoint(m), tmp_path / "x")


def test_dense_checkpoint_round_trip(tmp_path, tiny_model):
    back = load_checkpoint(save_checkpoint(dense_checkpoint(tiny_model, {"k": 1}), tmp_path / "d"))
    assert back.meta == {"k": 1}
    assert back.levels.fractions == [1.0]
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(back.params.named(), tiny_model.params.named()))
