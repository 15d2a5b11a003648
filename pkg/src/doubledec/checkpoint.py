"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"DDCK"
    version u32      currently 1
    config  u64 length + UTF-8 JSON (run config plus resume metadata)
    count   u32      number of tensors
    tensor  u16 name length, name UTF-8,
            u8 ndim, ndim x u64 dims,
            raw little-endian float32 data, C order

Tensors are written in sorted name order, so save -> load -> save is
byte-identical. Parameters, Adam moments (opt.m.* / opt.v.*), and anything
else float32-shaped can live here; training state therefore round-trips
exactly and a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DDCK"
VERSION = 1


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", f.read(8))
        config = json.loads(f.read(cfg_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            n_elem = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n_elem), dtype="<f4")
            tensors[name] = data.reshape(shape).copy()
    return config, tensors


def split_train_state(tensors: dict[str, np.ndarray]):
    """Separate model parameters from optimizer moment tensors."""
    params, m_state, v_state = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            m_state[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            v_state[name[len("opt.v."):]] = arr
        else:
            params[name] = arr
    return params, m_state, v_state


def merge_train_state(params, m_state=None, v_state=None) -> dict[str, np.ndarray]:
    tensors = dict(params)
    for name, arr in (m_state or {}).items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in (v_state or {}).items():
        tensors[f"opt.v.{name}"] = arr
    return tensors
