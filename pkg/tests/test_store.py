import numpy as np
import pytest

from dpembed.aggregation import Embedding, EmbeddingSet, normalize
from dpembed.store import read_store, write_store


def test_round_trip_preserves_float32_values(tmp_path):
    rng = np.random.default_rng(0)
    members = tuple(Embedding(rng.standard_normal(6)) for _ in range(5))
    labels = tuple(f"img-{i}" for i in range(5))
    s = EmbeddingSet(members=members, source_labels=labels)
    path = tmp_path / "plain.dpeb"
    write_store(path, s, extra={"note": "test"})
    back, trailer = read_store(path)
    assert back.source_labels == labels
    assert trailer["note"] == "test"
    assert not back.all_normalized()
    expect = s.matrix().astype(np.float32).astype(np.float64)
    assert np.array_equal(back.matrix(), expect)


def test_normalized_store_restores_unit_norm(tmp_path):
    rng = np.random.default_rng(1)
    members = tuple(normalize(Embedding(rng.standard_normal(16))) for _ in range(8))
    s = EmbeddingSet(members=members)
    path = tmp_path / "unit.dpeb"
    write_store(path, s)
    back, _ = read_store(path)
    assert back.all_normalized()
    for orig, readback in zip(s.members, back.members):
        assert np.linalg.norm(readback.values) == pytest.approx(1.0, abs=1e-12)
        # direction drift limited to float32 quantization
        assert float(orig.values @ readback.values) > 1.0 - 1e-9


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.dpeb"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        read_store(path)


def test_truncated_data_rejected(tmp_path):
    rng = np.random.default_rng(2)
    s = EmbeddingSet(members=(Embedding(rng.standard_normal(8)),))
    path = tmp_path / "trunc.dpeb"
    write_store(path, s)
    raw = path.read_bytes()
    path.write_bytes(raw[:20])  # cuts into the float32 block
    with pytest.raises(ValueError, match="truncated"):
        read_store(path)
    path.write_bytes(raw[: len(raw) - 10])  # cuts into the JSON trailer
    with pytest.raises(ValueError, match="truncated or corrupt"):
        read_store(path)


def test_extra_cannot_shadow_required_keys(tmp_path):
    s = EmbeddingSet(members=(Embedding(np.ones(3)),))
    with pytest.raises(ValueError):
        write_store(tmp_path / "x.dpeb", s, extra={"normalized": False})
