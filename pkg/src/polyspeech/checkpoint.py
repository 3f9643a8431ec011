"""PSPK checkpoint format.

Layout: magic "PSPK", format version (u32 LE), UTF-8 config document
(length-prefixed JSON), named tensors in lexicographic name order (name,
rank, dims, float64 little-endian payload), then a SHA-256 checksum of all
preceding bytes. Tensors are stored at full float64 precision so that a
loaded model's forward pass is bitwise identical to the pre-save one.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSPK"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    config: dict | None = None) -> None:
    """Write tensors + config snapshot; deterministic byte output."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    doc = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(doc)))
    parts.append(doc)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    blob = body + hashlib.sha256(body).digest()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, config); verifies magic, version, checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PSPK checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, file corrupted")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (doc_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = json.loads(body[off:off + doc_len].decode("utf-8"))
    off += doc_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off)
        off += 8 * size
        tensors[name] = arr.reshape(dims).astype(np.float64)
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return tensors, config


def save_with_optimizer(path, tensors: dict[str, np.ndarray], opt,
                        config: dict | None = None) -> None:
    """Checkpoint model tensors together with Adam state (moments stored
    under optim.* names, step count as a scalar)."""
    out = dict(tensors)
    out["optim.step_count"] = np.array([float(opt.step_count)])
    for name, m in opt.first_moment.items():
        out[f"optim.m1.{name}"] = m
    for name, v in opt.second_moment.items():
        out[f"optim.m2.{name}"] = v
    save_checkpoint(path, out, config)


def split_optimizer(tensors: dict[str, np.ndarray]
                    ) -> tuple[dict[str, np.ndarray], dict]:
    """Separate model tensors from optim.* entries. Returns (model tensors,
    {"step_count": int, "m1": {...}, "m2": {...}})."""
    model = {}
    opt = {"step_count": 0, "m1": {}, "m2": {}}
    for name, arr in tensors.items():
        if name == "optim.step_count":
            opt["step_count"] = int(arr[0])
        elif name.startswith("optim.m1."):
            opt["m1"][name[len("optim.m1."):]] = arr
        elif name.startswith("optim.m2."):
            opt["m2"][name[len("optim.m2."):]] = arr
        else:
            model[name] = arr
    return model, opt
