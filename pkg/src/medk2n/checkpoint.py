"""Binary checkpoint format.

Layout (little endian)::

    b"MK2N" | u16 version | u16 flags | 32-byte architecture hash
    | u32 header length | JSON header | array bytes | 32-byte SHA-256 of all
    preceding bytes

The header lists ``[name, dtype, shape, offset, nbytes]`` per array plus an
optional free-form ``meta`` dict. Loading verifies magic, version, trailer
digest and (when given) the expected architecture hash before returning
anything, so a truncated or foreign file never yields partial state.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MK2N"
VERSION = 1
_PREFIX = struct.Struct("<4sHH32sI")


class CheckpointError(IOError):
    pass


def save_checkpoint(arrays, path, arch_hash: bytes, meta=None):
    """Write named arrays (dict name -> ndarray/tensor) atomically."""
    if len(arch_hash) != 32:
        raise ValueError("architecture hash must be 32 bytes")
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, order="C")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append([name, arr.dtype.str.lstrip("<>|="), list(arr.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, 0, arch_hash, len(header)) + header + b"".join(blobs)
    data = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_hash: bytes = None):
    """Return ``(arrays, meta)``; raises CheckpointError on any mismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, _, arch, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    if expected_hash is not None and arch != expected_hash:
        raise CheckpointError(f"{path}: architecture hash {arch.hex()[:12]} does not match "
                              f"the configured model {expected_hash.hex()[:12]}")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen])
    base = start + hlen
    arrays = {}
    for name, dtype, shape, off, nbytes in header["arrays"]:
        dt = np.dtype(dtype).newbyteorder("<")
        arr = np.frombuffer(body, dtype=dt, count=nbytes // max(dt.itemsize, 1), offset=base + off)
        arrays[name] = arr.reshape(tuple(shape)).astype(dt.newbyteorder("="), copy=True)
    return arrays, header.get("meta", {}), arch


def save_model(model, path, arch_hash, meta=None):
    return save_checkpoint(model.state_dict(), path, arch_hash, meta)


def load_model(model, path, arch_hash):
    arrays, meta, _ = load_checkpoint(path, arch_hash)
    state = model.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise CheckpointError(f"{path}: parameter manifest mismatch (missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]})")
    for k, v in arrays.items():
        if tuple(state[k].shape) != v.shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, model expects {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return meta
