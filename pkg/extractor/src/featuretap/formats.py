"""Writers for the feature-file and manifest formats patchbank consumes.

This module is the whole coupling surface between the extractor and the
scoring pipeline, so the layout is spelled out here rather than imported:

    magic          8 bytes   b"PBFEATS\\0"
    version        u32 LE    currently 1
    scale_count    u32 LE
    dims table     scale_count * (channels u64, height u64, width u64) LE
    payloads       float32 LE, one block per scale, C-order
    id length      u32 LE
    sample id      UTF-8 bytes

Masks reuse the container with a single 1-channel scale of 0/1 values.
The manifest is JSON: input_resolution, an ordered entry list carrying
split/label and file paths relative to the manifest, and free-form
metadata. Any change here must stay byte-compatible with the consumer's
reader; the test suite checks that directly against patchbank.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError

FEATURE_MAGIC = b"PBFEATS\x00"
FEATURE_VERSION = 1
_MAX_DIM = 2**31 - 1


def write_feature_file(
    path: str | Path, sample_id: str, scales: Sequence[np.ndarray]
) -> None:
    """Serialize one sample's multi-scale activations."""
    if not scales:
        raise ConfigError("a feature file needs at least one scale")
    arrays = []
    for i, scale in enumerate(scales):
        arr = np.ascontiguousarray(scale, dtype="<f4")
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise ConfigError(
                f"scale {i} must be (channels, height, width), got {arr.shape}"
            )
        if max(arr.shape) > _MAX_DIM:
            raise ConfigError(f"scale {i} dimension exceeds the format limit")
        if not np.isfinite(arr).all():
            raise ConfigError(f"scale {i} contains non-finite values")
        arrays.append(arr)
    ident = sample_id.encode("utf-8")
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(arrays))]
    for arr in arrays:
        parts.append(struct.pack("<QQQ", *arr.shape))
    for arr in arrays:
        parts.append(arr.tobytes())
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    Path(path).write_bytes(b"".join(parts))


def write_mask_file(path: str | Path, sample_id: str, mask: np.ndarray) -> None:
    """Store a binary ground-truth mask as a 1-channel feature container."""
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim != 2:
        raise ConfigError(f"mask must be 2-d, got shape {m.shape}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ConfigError("mask values must be 0 or 1")
    write_feature_file(path, sample_id, [m[None]])


def write_manifest_file(
    path: str | Path,
    input_resolution: tuple[int, int],
    entries: Sequence[dict],
    metadata: dict,
) -> None:
    """Write the dataset manifest next to the files it references.

    Each entry dict must already hold posix paths relative to the manifest
    directory (this writer lays out the tree, so nothing needs resolving).
    """
    doc = {
        "input_resolution": [int(input_resolution[0]), int(input_resolution[1])],
        "entries": list(entries),
    }
    if metadata:
        doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
