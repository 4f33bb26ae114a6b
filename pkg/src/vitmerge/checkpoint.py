"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      16 bytes  b"VITMERGE-CKPT-1\\0"
    version    u32
    header     u32 length + UTF-8 JSON (sorted keys): kind, config, lineage, seed, meta
    count      u32
    entries    count x [u32 name length, UTF-8 name, u32 ndim, ndim x u64 extent,
                        float32 values, row-major]
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from vitmerge import ConfigError, VitMergeError
from vitmerge.train import GateConfig, GateNet
from vitmerge.vit import ViTConfig, ViTParams

MAGIC = b"VITMERGE-CKPT-1\x00"
VERSION = 1
KINDS = ("vit", "gate", "static-cache")
LINEAGES = ("pretrained", "from-scratch", "base", "merged", "gate")


class CheckpointError(VitMergeError, IOError):
    pass


def _dumps(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write(path, kind: str, tensors: Mapping[str, np.ndarray], header: dict) -> None:
    if kind not in KINDS:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    head = dict(header, kind=kind)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    hb = _dumps(head)
    chunks += [struct.pack("<I", len(hb)), hb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def _parse(buf: bytes) -> Tuple[dict, Dict[str, np.ndarray], int]:
    off = 20
    (hl,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + hl].decode("utf-8"))
    off += hl
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nl].decode("utf-8")
        off += nl
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(np.float32)
    return header, tensors, off


def read(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:16] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a vitmerge checkpoint")
    if len(buf) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (version,) = struct.unpack_from("<I", buf, 16)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header, tensors, off = _parse(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return header, tensors


def save_vit(path, params: ViTParams, *, lineage: str = "pretrained", seed: int = 0,
             meta: Optional[dict] = None) -> None:
    if lineage not in LINEAGES:
        raise ConfigError(f"unknown lineage {lineage!r}")
    header = {"config": params.config.to_dict(), "lineage": lineage, "seed": int(seed), "meta": meta or {}}
    write(path, "vit", dict(params), header)


def load_vit(path) -> Tuple[ViTParams, dict]:
    header, tensors = read(path)
    if header.get("kind") != "vit":
        raise CheckpointError(f"{path}: expected a ViT checkpoint, found {header.get('kind')!r}")
    return ViTParams(ViTConfig.from_dict(header["config"]), tensors), header


def save_gate(path, gate: GateNet, *, seed: int = 0, meta: Optional[dict] = None) -> None:
    header = {"config": gate.config.to_dict(), "lineage": "gate", "seed": int(seed), "meta": meta or {}}
    write(path, "gate", dict(gate.tensors), header)


def load_gate(path) -> Tuple[GateNet, dict]:
    header, tensors = read(path)
    if header.get("kind") != "gate":
        raise CheckpointError(f"{path}: expected a gate checkpoint, found {header.get('kind')!r}")
    return GateNet(GateConfig.from_dict(header["config"]), tensors), header
