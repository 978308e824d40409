"""Unified checkpoint container used by every trained component.

Binary layout: magic "TVLM\\0", version u16, table count u32, then per entry
{u16 name length, name bytes, u8 ndim, u32 dims..., float32 data}.  A JSON
sidecar at <path>.json carries hyperparameters and training metadata,
including the producing config hash.
"""

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import DecodeError, UnsupportedVersion

MAGIC = b"TVLM\x00"
VERSION = 1


def save_checkpoint(path, tensors, meta):
    """Write named float32 tensors plus a JSON metadata sidecar."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(
                tensors[name].detach().cpu().numpy()
                if isinstance(tensors[name], torch.Tensor) else tensors[name],
                dtype="<f4",
            )
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read (tensors, meta) back; tensors come out as float32 torch tensors."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise DecodeError(f"bad checkpoint magic {data[:5]!r}", offset=0)
    offset = len(MAGIC)

    def take(count, what):
        nonlocal offset
        if offset + count > len(data):
            raise DecodeError(f"truncated checkpoint while reading {what}", offset=offset)
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {VERSION}",
                                 offset=len(MAGIC))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        numel = int(np.prod(shape)) if ndim else 1
        raw = take(numel * 4, f"{name} data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    if offset != len(data):
        raise DecodeError("trailing bytes after parameter table", offset=offset)
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return tensors, meta


def state_dict_tensors(module, prefix=""):
    """Module state dict as plain float32 tensors with an optional prefix."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().to(torch.float32)
    return out


def load_state_into(module, tensors, prefix=""):
    """Load prefixed tensors back into a module, strict on coverage."""
    state = {}
    for name, tensor in tensors.items():
        if name.startswith(prefix):
            state[name[len(prefix):]] = tensor
    module.load_state_dict(state)
    return module


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
