"""The compressed memory bank of normal patch embeddings.

The bank is built once, before descriptor training, and then frozen: k-means
on the first train sample's embeddings picks the centers, and every further
sample nudges them by an exponential moving average toward greedily matched
partners (each center grabs its nearest not-yet-taken patch, in center
order). Squared Euclidean distance is used throughout.

Distance scans here deliberately loop over centers, holding only (T,) rows
and a (T, depth) difference buffer at a time: peak transient memory during
bank construction stays proportional to T * depth and never to T * M.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import PatchDescriptor, embed_grid
from .errors import (
    BadMagicError,
    FeatureFormatError,
    ManifestError,
    TruncatedPayloadError,
    ValidationError,
)
from .featureio import DatasetManifest, read_feature_set
from .patches import assemble_patch_grid

BANK_MAGIC = b"PBBANK0\x00"
BANK_VERSION = 1


@dataclass
class BankConfig:
    """Compression ratios and streaming-update parameters."""

    gamma_c: float = 1.0  # bank size as a fraction of the patch count
    gamma_d: float = 1.0  # embedding width as a fraction of the feature depth
    ema_beta: float = 0.1
    kmeans_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma_c", "gamma_d", "ema_beta"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {v}")
        if self.kmeans_iters < 1:
            raise ValidationError("kmeans_iters must be at least 1")


@dataclass
class MemoryBank:
    centers: np.ndarray  # (size, depth)

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValidationError(f"bank centers must be (size, depth), got {self.centers.shape}")
        if not np.isfinite(self.centers).all():
            raise ValidationError("bank centers contain non-finite values")

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def depth(self) -> int:
        return self.centers.shape[1]


@dataclass
class NeighborSet:
    """Nearest-center indices with their squared distances, nearest first."""

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.distances.shape or self.indices.ndim != 1:
            raise ValidationError("indices and distances must be matching 1-d arrays")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValidationError("neighbor indices must be unique")
        if np.any(np.diff(self.distances) < 0):
            raise ValidationError("neighbor distances must be non-decreasing")


def compressed_count(ratio: float, total: int) -> int:
    """Half-up rounding of ratio * total, floored at 1."""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, int(ratio * total + 0.5))


def _as_points(embedded: np.ndarray) -> np.ndarray:
    """(depth, h, w) -> (h*w, depth) in row-major patch order; 2-d passes through."""
    e = np.asarray(embedded)
    if e.ndim == 3:
        return e.reshape(e.shape[0], -1).T
    if e.ndim == 2:
        return e
    raise ValidationError(f"expected (depth, h, w) or (points, depth), got shape {e.shape}")


def _assign_to_nearest(points: np.ndarray, centers: np.ndarray):
    """Per-point nearest center, looping over centers; ties pick the lowest index."""
    count = points.shape[0]
    best = np.full(count, np.inf)
    labels = np.zeros(count, dtype=np.int64)
    for j in range(centers.shape[0]):
        d = np.sum((points - centers[j]) ** 2, axis=-1)
        better = d < best
        labels[better] = j
        best[better] = d[better]
    return labels, best


def kmeans_init(embedded: np.ndarray, size: int, iters: int = 100, seed: int = 0) -> MemoryBank:
    """Lloyd's algorithm with greedy-probabilistic (k-means++) seeding.

    Runs until the inertia's relative change drops below 1e-6 or iters is
    exhausted. Empty clusters are re-seeded to the point currently farthest
    from its center. Fully deterministic for a given seed.
    """
    points = _as_points(embedded).astype(np.float64, copy=False)
    total = points.shape[0]
    if not 1 <= size <= total:
        raise ValidationError(f"cluster count {size} must lie in 1..{total}")
    rng = np.random.default_rng(seed)

    centers = np.empty((size, points.shape[1]))
    centers[0] = points[rng.integers(total)]
    d2 = np.sum((points - centers[0]) ** 2, axis=-1)
    for j in range(1, size):
        mass = d2.sum()
        if mass > 0:
            pick = rng.choice(total, p=d2 / mass)
        else:
            pick = rng.integers(total)
        centers[j] = points[pick]
        np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=-1), out=d2)

    prev = None
    for _ in range(iters):
        labels, best = _assign_to_nearest(points, centers)
        counts = np.bincount(labels, minlength=size)
        for j in range(size):
            if counts[j]:
                centers[j] = points[labels == j].mean(axis=0)
        if not counts.all():
            spare = best.copy()
            for j in np.flatnonzero(counts == 0):
                t = int(np.argmax(spare))
                centers[j] = points[t]
                spare[t] = -1.0
        inertia = float(best.sum())
        if prev is not None and abs(prev - inertia) <= 1e-6 * max(inertia, 1e-300):
            break
        prev = inertia
    return MemoryBank(centers=centers)


def match_nearest_unused(bank: MemoryBank, embedded: np.ndarray) -> np.ndarray:
    """For each center in index order, its nearest patch not taken by an
    earlier center. Returns the matched patch vectors, shape (size, depth)."""
    points = _as_points(embedded)
    if points.shape[1] != bank.depth:
        raise ValidationError(
            f"embedding depth {points.shape[1]} does not match bank depth {bank.depth}"
        )
    if points.shape[0] < bank.size:
        raise ValidationError(
            f"need at least {bank.size} patches to match, got {points.shape[0]}"
        )
    taken = np.zeros(points.shape[0], dtype=bool)
    matched = np.empty((bank.size, points.shape[1]), dtype=points.dtype)
    for j in range(bank.size):
        d = np.sum((points - bank.centers[j]) ** 2, axis=-1)
        d[taken] = np.inf
        t = int(np.argmin(d))
        matched[j] = points[t]
        taken[t] = True
    return matched


def ema_update(bank: MemoryBank, matched: np.ndarray, beta: float) -> MemoryBank:
    """Convex step of the centers toward their matched patches."""
    if not 0.0 < beta <= 1.0:
        raise ValidationError(f"beta must lie in (0, 1], got {beta}")
    if matched.shape != bank.centers.shape:
        raise ValidationError(
            f"matched shape {matched.shape} does not match bank {bank.centers.shape}"
        )
    return MemoryBank(centers=(1.0 - beta) * bank.centers + beta * matched)


def _load_grid(entry):
    return assemble_patch_grid(read_feature_set(entry.feature_path))


def build_bank(
    manifest: DatasetManifest, descriptor: PatchDescriptor, config: BankConfig
) -> MemoryBank:
    """Initialize on the first train sample, then stream EMA updates over the
    rest. The result depends on T and the ratios, never on the sample count;
    one sample's features are resident at a time."""
    entries = manifest.train_entries
    if not entries:
        raise ManifestError("manifest has no train entries")
    first = embed_grid(descriptor, _load_grid(entries[0]))
    patch_count = first.shape[1] * first.shape[2]
    size = compressed_count(config.gamma_c, patch_count)
    bank = kmeans_init(first, size, config.kmeans_iters, config.seed)
    expected = first.shape
    del first
    for entry in entries[1:]:
        emb = embed_grid(descriptor, _load_grid(entry))
        if emb.shape != expected:
            raise ValidationError(
                f"{entry.sample_id}: embedding shape {emb.shape} differs from "
                f"the first sample's {expected}"
            )
        bank = ema_update(bank, match_nearest_unused(bank, emb), config.ema_beta)
    return bank


def knn(bank: MemoryBank, query: np.ndarray, count: int) -> NeighborSet:
    """The count nearest centers to one query vector (ties: lower index)."""
    q = np.asarray(query)
    if q.shape != (bank.depth,):
        raise ValidationError(f"query shape {q.shape} must be ({bank.depth},)")
    if not 1 <= count <= bank.size:
        raise ValidationError(f"neighbor count {count} must lie in 1..{bank.size}")
    d = np.sum((bank.centers - q) ** 2, axis=-1)
    order = np.argsort(d, kind="stable")[:count]
    return NeighborSet(indices=order, distances=d[order])


def nearest_centers(
    points: np.ndarray,
    centers: np.ndarray,
    count: int,
    chunk_bytes: int = 64 * 2**20,
) -> tuple[np.ndarray, np.ndarray]:
    """Blocked nearest-center search for many points at once.

    Returns (indices, distances), each (len(points), count), rows sorted by
    distance with ties broken toward lower center indices. Bit-identical to
    scanning one point at a time; chunking only bounds the temporary
    difference tensor, it never changes the arithmetic.
    """
    pts = np.asarray(points)
    if not 1 <= count <= centers.shape[0]:
        raise ValidationError(f"neighbor count {count} must lie in 1..{centers.shape[0]}")
    total = pts.shape[0]
    width = centers.shape[0] * centers.shape[1] * 8
    step = max(1, min(total, chunk_bytes // max(width, 1)))
    indices = np.empty((total, count), dtype=np.int64)
    dists = np.empty((total, count))
    for start in range(0, total, step):
        block = pts[start : start + step]
        d = np.sum((block[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        order = np.argsort(d, axis=1, kind="stable")[:, :count]
        indices[start : start + step] = order
        dists[start : start + step] = np.take_along_axis(d, order, axis=1)
    return indices, dists


def save_bank(path: str | Path, bank: MemoryBank) -> None:
    """Binary checkpoint with a float32 payload."""
    Path(path).write_bytes(
        BANK_MAGIC
        + struct.pack("<IIQQ", BANK_VERSION, 0, bank.size, bank.depth)
        + np.ascontiguousarray(bank.centers, dtype="<f4").tobytes()
    )


def load_bank(path: str | Path) -> MemoryBank:
    p = Path(path)
    raw = p.read_bytes()
    if raw[:8] != BANK_MAGIC:
        raise BadMagicError(f"{p}: not a memory bank checkpoint")
    if len(raw) < 32:
        raise TruncatedPayloadError(f"{p}: header cut off")
    version, _, size, depth = struct.unpack_from("<IIQQ", raw, 8)
    if version != BANK_VERSION:
        raise FeatureFormatError(f"{p}: unsupported version {version}")
    if size < 1 or depth < 1 or max(size, depth) > 2**31 - 1:
        raise FeatureFormatError(f"{p}: invalid dims ({size}, {depth})")
    need = 32 + size * depth * 4
    if len(raw) < need:
        raise TruncatedPayloadError(f"{p}: payload needs {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise FeatureFormatError(f"{p}: {len(raw) - need} trailing bytes")
    centers = np.frombuffer(raw, dtype="<f4", count=size * depth, offset=32)
    if not np.isfinite(centers).all():
        raise FeatureFormatError(f"{p}: non-finite center values")
    return MemoryBank(centers=centers.reshape(size, depth).copy())
