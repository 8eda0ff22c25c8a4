"""RDTN tensor files and checkpoint directories.

RDTN layout: ``b"RDTN"``, u8 version, u8 rank, rank x u64 little-endian dims,
then the row-major little-endian float32 payload.

A checkpoint is a directory holding one ``<name>.rdtn`` per parameter and a
``config.json`` sidecar with the architecture hyperparameters and the ordered
parameter names.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

RDTN_MAGIC = b"RDTN"
RDTN_VERSION = 1
SIDECAR = "config.json"


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a u8")
    header = RDTN_MAGIC + struct.pack("<BB", RDTN_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != RDTN_MAGIC:
        raise FormatError("not an RDTN tensor (bad magic)")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != RDTN_VERSION:
        raise FormatError(f"unsupported RDTN version {version}")
    offset = 6 + 8 * rank
    if len(blob) < offset:
        raise FormatError("truncated RDTN header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise FormatError(f"RDTN payload length {len(blob) - offset} does not match dims {dims}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).astype(np.float32).reshape(dims)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], config: Mapping) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for stale in root.glob("*.rdtn"):
        if stale.stem not in params:
            stale.unlink()
    for name, arr in params.items():
        save_tensor(root / f"{name}.rdtn", arr)
    sidecar = {"config": dict(config), "params": list(params)}
    (root / SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    meta_path = root / SIDECAR
    if not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint sidecar missing: {meta_path}")
    meta = json.loads(meta_path.read_text())
    params = {name: load_tensor(root / f"{name}.rdtn") for name in meta["params"]}
    return params, meta["config"]
