"""Checkpoint container: round trips and corruption detection."""

import struct

import pytest
import torch

from eivst.checkpoint import (
    MAGIC,
    file_sha256,
    load_checkpoint,
    load_state_into,
    save_checkpoint,
    state_dict_tensors,
)
from eivst.errors import DecodeError, UnsupportedVersion


def _sample_tensors():
    g = torch.Generator().manual_seed(5)
    return {
        "layer.weight": torch.randn(4, 3, generator=g),
        "layer.bias": torch.randn(4, generator=g),
        "scalar": torch.tensor(2.5),
    }


def test_round_trip(tmp_path):
    # [TRIVIAL] float32 tensors and metadata survive a write/read cycle.
    path = tmp_path / "model.ckpt"
    tensors = _sample_tensors()
    meta = {"config_hash": "abc", "steps": 12}
    save_checkpoint(path, tensors, meta)
    back, meta_back = load_checkpoint(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert torch.equal(back[name], tensors[name])
        assert back[name].dtype == torch.float32
    assert meta_back == meta


def test_write_is_byte_stable(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, _sample_tensors(), {})
    save_checkpoint(b, _sample_tensors(), {})
    assert a.read_bytes() == b.read_bytes()
    assert file_sha256(a) == file_sha256(b)


def test_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _sample_tensors(), {})
    raw = bytearray(path.read_bytes())
    raw[1] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises(DecodeError):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _sample_tensors(), {})
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC) : len(MAGIC) + 2] = struct.pack("<H", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(path)


def test_truncation(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _sample_tensors(), {})
    raw = path.read_bytes()
    for cut in (len(MAGIC) + 2, len(raw) - 3):
        path.write_bytes(raw[:cut])
        with pytest.raises(DecodeError) as exc:
            load_checkpoint(path)
        assert 0 <= exc.value.offset <= cut


def test_trailing_bytes(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _sample_tensors(), {})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(DecodeError):
        load_checkpoint(path)


def test_missing_sidecar_gives_empty_meta(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _sample_tensors(), {"x": 1})
    (tmp_path / "model.ckpt.json").unlink()
    _, meta = load_checkpoint(path)
    assert meta == {}


def test_state_dict_round_trip(tmp_path):
    lin = torch.nn.Linear(3, 2)
    path = tmp_path / "lin.ckpt"
    save_checkpoint(path, state_dict_tensors(lin, prefix="enc."), {})
    tensors, _ = load_checkpoint(path)
    fresh = torch.nn.Linear(3, 2)
    load_state_into(fresh, tensors, prefix="enc.")
    assert torch.equal(fresh.weight, lin.weight)
    assert torch.equal(fresh.bias, lin.bias)
