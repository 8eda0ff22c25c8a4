"""Latent replay buffer: k-means cluster sampling of encoder features.

Only token features (T x E float vectors) and small integer metadata are ever
stored; there is no field that could hold pixels.

RDLB file layout (little-endian)::

    b"RDLB" | u8 version | u32 count | u32 T | u32 E
    count x ( u32 cluster_id | u16 source_stage | T*E f32 | u32 crc32(entry) )
    u32 crc32(everything above)

Sampling metadata (ratios, dataset fingerprint, source indices) goes to a JSON
sidecar next to the buffer file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bke import TokenBatch

log = logging.getLogger(__name__)

MAGIC = b"RDLB"
VERSION = 1
_HEADER = struct.Struct("<4sBIII")
_ENTRY_HEAD = struct.Struct("<IH")


class BufferConfigError(ValueError):
    pass


class BufferFormatError(ValueError):
    pass


class BufferIntegrityError(ValueError):
    pass


class EmptyBufferError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences: exact zeros for coincident points
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nke,nke->nk", diff, diff)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center; take unused indices in order
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(remaining[0])
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> ClusterModel:
    n = x.shape[0]
    centers = _plus_plus(x, k, rng)
    assign = np.full(n, -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centers)
        new_assign = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        point_cost = d[np.arange(n), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(point_cost.argmax())
                log.debug("kmeans: cluster %d empty, reseeding at point %d", c, far)
                centers[c] = x[far]
                point_cost[far] = 0.0
    d = _sq_dists(x, centers)
    assign = d.argmin(axis=1)
    inertia = float(d[np.arange(n), assign].sum())
    if inertia < history[-1]:
        history.append(inertia)
    return ClusterModel(centers, assign, inertia, history, it)


def kmeans(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 10) -> ClusterModel:
    """Best of ``n_init`` Lloyd runs, each from its own k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its current
    center. Each run stops when assignments no longer change or after
    ``max_iters``. The returned history belongs to the winning run.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise BufferConfigError(f"kmeans: features must be (N, E), got {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise BufferConfigError(f"kmeans: need 1 <= k <= N, got k={k}, N={n}")
    if max_iters < 1 or n_init < 1:
        raise BufferConfigError(f"kmeans: max_iters and n_init must be >= 1, got {max_iters}, {n_init}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, k, max_iters, rng)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


@dataclass
class BufferEntry:
    feature: np.ndarray  # (T, E) float32
    source_stage: int
    cluster_id: int


@dataclass
class MemoryBuffer:
    entries: list[BufferEntry]
    alpha: float
    beta: float
    created_from: str
    source_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def token_shape(self) -> tuple[int, int]:
        if not self.entries:
            raise EmptyBufferError("buffer has no entries")
        return self.entries[0].feature.shape

    def stacked(self) -> np.ndarray:
        return np.stack([e.feature for e in self.entries])

    @classmethod
    def merge(cls, buffers: Sequence["MemoryBuffer"]) -> "MemoryBuffer":
        entries = [e for b in buffers for e in b.entries]
        return cls(
            entries,
            buffers[0].alpha,
            buffers[0].beta,
            "+".join(b.created_from for b in buffers),
            [i for b in buffers for i in b.source_indices],
        )


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def sample_buffer(
    features: Sequence[np.ndarray] | np.ndarray,
    pooled: np.ndarray | None = None,
    alpha: float = 0.01,
    beta: float = 0.05,
    seed: int = 0,
    source_stage: int = 1,
    created_from: str | None = None,
    max_iters: int = 100,
) -> MemoryBuffer:
    """Cluster pooled image features and keep the members nearest each center.

    ``features`` holds the per-image (T, E) token features; ``pooled`` their
    (N, E) clustering representation (token mean when omitted).
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 3:
        raise BufferConfigError(f"sample_buffer: features must be (N, T, E), got {feats.shape}")
    n = feats.shape[0]
    if pooled is None:
        pooled = feats.astype(np.float64).mean(axis=1)
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape[0] != n:
        raise BufferConfigError(f"sample_buffer: {pooled.shape[0]} pooled rows for {n} images")
    if not 0 < alpha <= beta:
        raise BufferConfigError(f"sample_buffer: need 0 < alpha <= beta, got alpha={alpha}, beta={beta}")
    if beta > 1:
        raise BufferConfigError(f"sample_buffer: N*beta={n * beta:g} exceeds N={n}")
    k = round_half_up(n * alpha)
    size = round_half_up(n * beta)
    if k < 1:
        raise BufferConfigError(f"sample_buffer: N*alpha={n * alpha:g} rounds to zero clusters")
    if size < k:
        raise BufferConfigError(f"sample_buffer: {size} entries cannot cover {k} clusters")
    quota = max(1, round_half_up(beta / alpha))

    model = kmeans(pooled, k, max_iters=max_iters, seed=seed)
    dist = np.sqrt(_sq_dists(pooled, model.centers)[np.arange(n), model.assignments])
    # (distance, index) ordering makes ties deterministic
    order = np.lexsort((np.arange(n), dist))
    rank_in_cluster = np.zeros(n, dtype=int)
    seen = np.zeros(k, dtype=int)
    for i in order:
        c = model.assignments[i]
        rank_in_cluster[i] = seen[c]
        seen[c] += 1
    selected = rank_in_cluster < quota
    if selected.sum() < size:
        for i in order:
            if selected.sum() == size:
                break
            selected[i] = True
    elif selected.sum() > size:
        # drop the farthest picks but keep every cluster's nearest member
        for i in order[::-1]:
            if selected.sum() == size:
                break
            if selected[i] and rank_in_cluster[i] > 0:
                selected[i] = False
    chosen = [int(i) for i in order if selected[i]]
    chosen.sort(key=lambda i: (int(model.assignments[i]), rank_in_cluster[i]))
    entries = [BufferEntry(feats[i].copy(), source_stage, int(model.assignments[i])) for i in chosen]
    return MemoryBuffer(entries, alpha, beta, created_from or fingerprint(feats), chosen)


# -- persistence -----------------------------------------------------------------
def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def encode_buffer(buffer: MemoryBuffer) -> bytes:
    if not buffer.entries:
        raise EmptyBufferError("refusing to save an empty buffer")
    t, e = buffer.token_shape
    parts = [_HEADER.pack(MAGIC, VERSION, len(buffer.entries), t, e)]
    for entry in buffer.entries:
        if entry.feature.shape != (t, e):
            raise BufferFormatError(f"entry shape {entry.feature.shape} differs from {(t, e)}")
        body = _ENTRY_HEAD.pack(entry.cluster_id, entry.source_stage)
        body += np.ascontiguousarray(entry.feature, dtype="<f4").tobytes()
        parts.append(body + struct.pack("<I", zlib.crc32(body)))
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_buffer(blob: bytes) -> list[BufferEntry]:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise BufferFormatError("not an RDLB buffer file (bad magic)")
    _, version, count, t, e = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise BufferFormatError(f"unsupported RDLB version {version}")
    entry_size = _ENTRY_HEAD.size + 4 * t * e + 4
    expected = _HEADER.size + count * entry_size + 4
    if len(blob) != expected:
        raise BufferIntegrityError(f"buffer file is {len(blob)} bytes, header implies {expected}")
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    entries = []
    offset = _HEADER.size
    for idx in range(count):
        body = blob[offset : offset + entry_size - 4]
        (crc,) = struct.unpack_from("<I", blob, offset + entry_size - 4)
        if zlib.crc32(body) != crc:
            raise BufferIntegrityError(f"checksum mismatch in buffer entry {idx}")
        cluster_id, stage = _ENTRY_HEAD.unpack_from(body)
        feat = np.frombuffer(body, dtype="<f4", offset=_ENTRY_HEAD.size).astype(np.float32).reshape(t, e)
        entries.append(BufferEntry(feat, stage, cluster_id))
        offset += entry_size
    if zlib.crc32(blob[:-4]) != stored:
        raise BufferIntegrityError("whole-file checksum mismatch")
    return entries


def save(buffer: MemoryBuffer, path: str | Path) -> Path:
    path = Path(path)
    blob = encode_buffer(buffer)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    meta = {
        "alpha": buffer.alpha,
        "beta": buffer.beta,
        "created_from": buffer.created_from,
        "source_indices": list(buffer.source_indices),
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load(path: str | Path) -> MemoryBuffer:
    path = Path(path)
    entries = decode_buffer(path.read_bytes())
    meta = {"alpha": float("nan"), "beta": float("nan"), "created_from": "", "source_indices": []}
    if _sidecar(path).is_file():
        meta.update(json.loads(_sidecar(path).read_text()))
    return MemoryBuffer(entries, meta["alpha"], meta["beta"], meta["created_from"], meta["source_indices"])


def replay_indices(count: int, batch_size: int, seed) -> np.ndarray:
    if count < 1:
        raise EmptyBufferError("cannot replay from an empty buffer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if batch_size > count:
        return rng.integers(0, count, size=batch_size)
    return rng.choice(count, size=batch_size, replace=False)


def replay_batch(buffer: MemoryBuffer, batch_size: int, seed) -> TokenBatch:
    """Uniform draw of teacher features; with replacement only when the buffer is too small."""
    if not buffer.entries:
        raise EmptyBufferError("cannot replay from an empty buffer")
    idx = replay_indices(len(buffer.entries), batch_size, seed)
    return TokenBatch(np.stack([buffer.entries[i].feature for i in idx]), role="teacher")
