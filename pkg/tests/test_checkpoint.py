import numpy as np
import pytest
import torch

from medk2n.checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from medk2n.config import ModelConfig, architecture_hash
from medk2n.model import MedK2N
from medk2n.types import default_schema

H1 = bytes(range(32))
H2 = bytes(32)


def test_round_trip_bitwise(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.integers(0, 9, size=5).astype(np.int64),
              "c": np.float32(rng.normal(size=(2, 2, 2))), "scalar": np.array(3.5)}
    p = save_checkpoint(arrays, tmp_path / "x.mk2n", H1, {"note": "hi"})
    back, meta, arch = load_checkpoint(p, H1)
    assert meta == {"note": "hi"} and arch == H1
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_hash_mismatch(tmp_path):
    p = save_checkpoint({"a": np.zeros(3)}, tmp_path / "x.mk2n", H1)
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(p, H2)


def test_truncated(tmp_path):
    p = save_checkpoint({"a": np.arange(100.0)}, tmp_path / "x.mk2n", H1)
    data = p.read_bytes()
    for cut in (10, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p, H1)


def test_corrupted_and_foreign(tmp_path):
    p = save_checkpoint({"a": np.arange(10.0)}, tmp_path / "x.mk2n", H1)
    data = bytearray(p.read_bytes())
    data[-40] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)
    q = tmp_path / "y.mk2n"
    q.write_bytes(b"PK\x03\x04" + bytes(100))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(q)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.mk2n")


def test_no_temp_file_left(tmp_path):
    save_checkpoint({"a": np.zeros(2)}, tmp_path / "x.mk2n", H1)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.mk2n"]


def _model(dim):
    torch.manual_seed(dim)
    return MedK2N(default_schema(), ModelConfig(image_size=32, dim=dim, mem_slots=4, cmim_dim=8))


def test_model_round_trip_bit_exact(tmp_path):
    m = _model(8)
    m.fusion.record_quality(1, 2, 0.9)
    h = architecture_hash({"dim": 8})
    save_model(m, tmp_path / "m.mk2n", h)
    m2 = _model(8)
    load_model(m2, tmp_path / "m.mk2n", h)
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert a.numpy().tobytes() == b.numpy().tobytes(), k


def test_model_shape_mismatch_refused(tmp_path):
    h = architecture_hash({"dim": 8})
    save_model(_model(8), tmp_path / "m.mk2n", h)
    with pytest.raises(CheckpointError):
        load_model(_model(4), tmp_path / "m.mk2n", h)
