"""Named-tensor container files.

Byte layout (all integers little-endian)::

    magic      4 bytes   b"PDNT"
    version    uint32    1
    meta_len   uint32    length of the metadata blob
    meta       meta_len bytes, UTF-8 JSON object (free-form, may be "{}")
    count      uint32    number of tensors
    count x:
        name_len  uint16
        name      name_len bytes, UTF-8
        ndim      uint8
        dims      ndim x uint32
        payload   prod(dims) x float32, little-endian, C order

Tensors are written in the order given; a scalar has ndim 0 and one value.
"""
import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

MAGIC = b"PDNT"
VERSION = 1


def write_tensors(path, tensors: Mapping[str, np.ndarray], meta=None):
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.array(arr, dtype="<f4", order="C")
            key = name.encode("utf-8")
            f.write(struct.pack("<H", len(key)) + key)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic {data[:4]!r})")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", data, pos)
        dims = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after the last tensor")
    return out, meta


def state_to_arrays(module) -> Dict[str, np.ndarray]:
    """Floating-point entries of a module's state dict (parameters and BN statistics)."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items() if v.is_floating_point()}


def load_arrays(module, arrays: Mapping[str, np.ndarray]):
    import torch

    state = module.state_dict()
    expected = {k for k, v in state.items() if v.is_floating_point()}
    missing = expected - set(arrays)
    extra = set(arrays) - expected
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k in expected:
        if tuple(arrays[k].shape) != tuple(state[k].shape):
            raise ValueError(f"checkpoint tensor {k}: shape {arrays[k].shape} != {tuple(state[k].shape)}")
        state[k] = torch.from_numpy(np.asarray(arrays[k])).to(state[k].dtype)
    module.load_state_dict(state)
    return module
