"""Reading and writing pre-extracted feature files and dataset manifests.

A feature file stores one sample's multi-scale CNN activations:

    magic          8 bytes   b"PBFEATS\\0"
    version        u32 LE    currently 1
    scale_count    u32 LE
    dims table     scale_count * (channels u64, height u64, width u64) LE
    payloads       float32 LE, one block per scale, C-order (channel-major)
    id length      u32 LE
    sample id      UTF-8 bytes

The dims table sits before any payload so headers can be inspected without
touching the bulk of the file. Ground-truth masks reuse the same container
with a single 1-channel scale holding 0/1 values, so one reader covers both.

A dataset manifest is a JSON file listing samples, their split and label,
and paths (relative to the manifest) of their feature and mask files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    FeatureFormatError,
    ManifestError,
    NonFinitePayloadError,
    TruncatedPayloadError,
    ValidationError,
)

FEATURE_MAGIC = b"PBFEATS\x00"
FEATURE_VERSION = 1
_MAX_DIM = 2**31 - 1

SPLITS = ("train", "test")
LABELS = ("normal", "anomalous")


@dataclass
class MultiScaleFeatureSet:
    """One sample's feature tensors, coarsest-to-finest in any order.

    Each scale is a float32 array of shape (channels, height, width). All
    scale grids must evenly divide the largest grid so they can be aligned
    by interpolation later.
    """

    sample_id: str
    scales: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.scales = tuple(np.asarray(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        if not self.scales:
            raise ValidationError("feature set must contain at least one scale")
        for i, s in enumerate(self.scales):
            if s.ndim != 3:
                raise ValidationError(
                    f"scale {i} has shape {s.shape}, expected (channels, height, width)"
                )
            if s.dtype != np.float32:
                raise ValidationError(f"scale {i} has dtype {s.dtype}, expected float32")
            if any(d <= 0 for d in s.shape):
                raise ValidationError(f"scale {i} has an empty dimension: {s.shape}")
            if not np.isfinite(s).all():
                raise ValidationError(f"scale {i} contains non-finite values")
        grid_h, grid_w = self.grid_shape()
        for i, s in enumerate(self.scales):
            _, h, w = s.shape
            if grid_h % h or grid_w % w:
                raise ValidationError(
                    f"scale {i} grid {h}x{w} does not divide the largest grid "
                    f"{grid_h}x{grid_w}"
                )

    def grid_shape(self) -> tuple[int, int]:
        """Height and width of the largest (finest) scale grid."""
        areas = [s.shape[1] * s.shape[2] for s in self.scales]
        h, w = self.scales[int(np.argmax(areas))].shape[1:]
        for s in self.scales:
            if s.shape[1] > h or s.shape[2] > w:
                raise ValidationError(
                    "no single scale has both the largest height and width"
                )
        return h, w

    @property
    def total_channels(self) -> int:
        return sum(s.shape[0] for s in self.scales)


def write_feature_set(path: str | Path, feature_set: MultiScaleFeatureSet) -> None:
    """Serialize a feature set. Fails before writing if any dim overflows."""
    for s in feature_set.scales:
        if s.ndim == 3 and max(s.shape) > _MAX_DIM:
            raise FeatureFormatError(
                f"dimension {max(s.shape)} exceeds the format limit {_MAX_DIM}"
            )
    feature_set.validate()
    ident = feature_set.sample_id.encode("utf-8")
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(feature_set.scales))]
    for s in feature_set.scales:
        parts.append(struct.pack("<QQQ", *s.shape))
    for s in feature_set.scales:
        parts.append(np.ascontiguousarray(s, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    Path(path).write_bytes(b"".join(parts))


def _parse_header(raw: bytes, path: Path) -> tuple[list[tuple[int, int, int]], int]:
    """Return the dims table and the offset where payloads start."""
    if len(raw) < len(FEATURE_MAGIC):
        raise TruncatedPayloadError(f"{path}: file shorter than the magic prefix")
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(
            f"{path}: expected magic {FEATURE_MAGIC!r}, found {raw[:8]!r}"
        )
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{path}: header cut off at {len(raw)} bytes")
    version, scale_count = struct.unpack_from("<II", raw, 8)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if scale_count == 0:
        raise FeatureFormatError(f"{path}: zero scales")
    table_end = 16 + 24 * scale_count
    if len(raw) < table_end:
        raise TruncatedPayloadError(
            f"{path}: dims table needs {table_end} bytes, file has {len(raw)}"
        )
    dims = []
    for i in range(scale_count):
        d, h, w = struct.unpack_from("<QQQ", raw, 16 + 24 * i)
        if min(d, h, w) == 0 or max(d, h, w) > _MAX_DIM:
            raise FeatureFormatError(f"{path}: scale {i} has invalid dims ({d}, {h}, {w})")
        dims.append((int(d), int(h), int(w)))
    return dims, table_end


def read_feature_header(path: str | Path) -> list[tuple[int, int, int]]:
    """Dims table only, without loading payloads (reads the file prefix)."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(16)
        if len(head) >= 16 and head[:8] == FEATURE_MAGIC:
            (scale_count,) = struct.unpack_from("<I", head, 12)
            head += fh.read(24 * min(scale_count, 2**20))
    return _parse_header(head, p)[0]


def read_feature_set(path: str | Path) -> MultiScaleFeatureSet:
    """Parse and fully validate a feature file.

    Raises BadMagicError, TruncatedPayloadError, or NonFinitePayloadError for
    the distinct corruption modes, FeatureFormatError for anything else.
    """
    p = Path(path)
    raw = p.read_bytes()
    dims, offset = _parse_header(raw, p)
    scales = []
    for i, (d, h, w) in enumerate(dims):
        nbytes = d * h * w * 4
        if len(raw) < offset + nbytes:
            raise TruncatedPayloadError(
                f"{p}: scale {i} payload needs {nbytes} bytes at offset {offset}, "
                f"file has {len(raw) - offset}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=d * h * w, offset=offset)
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFinitePayloadError(
                f"{p}: non-finite value in scale {i} at flat offset {int(bad[0])}"
            )
        scales.append(arr.reshape(d, h, w).copy())
        offset += nbytes
    if len(raw) < offset + 4:
        raise TruncatedPayloadError(f"{p}: sample-id trailer missing")
    (id_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + id_len:
        raise TruncatedPayloadError(f"{p}: sample id cut off")
    try:
        sample_id = raw[offset : offset + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FeatureFormatError(f"{p}: sample id is not valid UTF-8") from exc
    offset += id_len
    if offset != len(raw):
        raise FeatureFormatError(f"{p}: {len(raw) - offset} trailing bytes")
    return MultiScaleFeatureSet(sample_id=sample_id, scales=tuple(scales))


def write_mask(path: str | Path, mask: np.ndarray, sample_id: str) -> None:
    """Store a binary ground-truth mask as a 1-channel feature container."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValidationError(f"mask must be 2-d, got shape {m.shape}")
    m32 = m.astype(np.float32)
    if not np.isin(m32, (0.0, 1.0)).all():
        raise ValidationError("mask values must be 0 or 1")
    write_feature_set(path, MultiScaleFeatureSet(sample_id, (m32[None],)))


def read_mask(path: str | Path) -> np.ndarray:
    """Load a mask written by write_mask; returns a (height, width) array."""
    fs = read_feature_set(path)
    if len(fs.scales) != 1 or fs.scales[0].shape[0] != 1:
        raise FeatureFormatError(f"{path}: mask file must hold one 1-channel scale")
    m = fs.scales[0][0]
    if not np.isin(m, (0.0, 1.0)).all():
        raise FeatureFormatError(f"{path}: mask values outside {{0, 1}}")
    return m


@dataclass
class ManifestEntry:
    sample_id: str
    split: str
    image_label: str
    feature_path: Path
    mask_path: Path | None = None
    image_path: Path | None = None


@dataclass
class DatasetManifest:
    """An ordered list of samples plus the original image resolution.

    Entry order is meaningful: bank construction consumes train entries in
    list order, so the manifest fixes the stream the model sees.
    """

    input_resolution: tuple[int, int]
    entries: list[ManifestEntry]
    metadata: dict = field(default_factory=dict)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @property
    def train_entries(self) -> list[ManifestEntry]:
        return self.split_entries("train")

    @property
    def test_entries(self) -> list[ManifestEntry]:
        return self.split_entries("test")


def _entry_from_json(obj: dict, base: Path, index: int) -> ManifestEntry:
    try:
        sample_id = obj["sample_id"]
        split = obj["split"]
        label = obj["image_label"]
        feature_path = obj["feature_path"]
    except KeyError as exc:
        raise ManifestError(f"entry {index}: missing field {exc.args[0]!r}") from exc
    if split not in SPLITS:
        raise ManifestError(f"entry {index}: unknown split {split!r}")
    if label not in LABELS:
        raise ManifestError(f"entry {index}: unknown label {label!r}")
    if split == "train" and label != "normal":
        raise ManifestError(f"entry {index} ({sample_id}): anomalous sample in train split")

    def resolve(p):
        return None if p is None else (base / p)

    return ManifestEntry(
        sample_id=sample_id,
        split=split,
        image_label=label,
        feature_path=base / feature_path,
        mask_path=resolve(obj.get("mask_path")),
        image_path=resolve(obj.get("image_path")),
    )


def load_manifest(path: str | Path, verify_files: bool = False) -> DatasetManifest:
    """Load and validate a manifest.

    Always checks labels, uniqueness, and that each feature file exists.
    With verify_files=True also parses every feature file and checks that
    referenced masks are binary and match input_resolution.
    """
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{p}: cannot load manifest: {exc}") from exc
    if not isinstance(obj, dict):
        raise ManifestError(f"{p}: manifest root must be an object")
    res = obj.get("input_resolution")
    if (
        not isinstance(res, (list, tuple))
        or len(res) != 2
        or any(not isinstance(v, int) or v <= 0 for v in res)
    ):
        raise ManifestError(f"{p}: input_resolution must be two positive integers")
    raw_entries = obj.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError(f"{p}: entries must be a non-empty list")
    base = p.parent
    entries = [_entry_from_json(e, base, i) for i, e in enumerate(raw_entries)]
    seen = set()
    for e in entries:
        if e.sample_id in seen:
            raise ManifestError(f"{p}: duplicate sample_id {e.sample_id!r}")
        seen.add(e.sample_id)
    for e in entries:
        if not e.feature_path.is_file():
            raise ManifestError(f"{p}: missing feature file {e.feature_path}")
    manifest = DatasetManifest(
        input_resolution=(res[0], res[1]),
        entries=entries,
        metadata=obj.get("metadata") or {},
    )
    if verify_files:
        _verify_manifest_files(manifest)
    return manifest


def _verify_manifest_files(manifest: DatasetManifest) -> None:
    for e in manifest.entries:
        fs = read_feature_set(e.feature_path)
        if fs.sample_id != e.sample_id:
            raise ManifestError(
                f"{e.feature_path}: file sample id {fs.sample_id!r} does not match "
                f"manifest id {e.sample_id!r}"
            )
        if e.mask_path is not None:
            mask = read_mask(e.mask_path)
            if mask.shape != manifest.input_resolution:
                raise ManifestError(
                    f"{e.mask_path}: mask shape {mask.shape} does not match "
                    f"input resolution {manifest.input_resolution}"
                )


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    """Write a manifest with paths relativized against its directory."""
    p = Path(path)
    base = p.parent.resolve()

    def relativize(q: Path | None):
        if q is None:
            return None
        q = Path(q)
        try:
            return q.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(q)

    entries = []
    for e in manifest.entries:
        obj = {
            "sample_id": e.sample_id,
            "split": e.split,
            "image_label": e.image_label,
            "feature_path": relativize(e.feature_path),
        }
        if e.mask_path is not None:
            obj["mask_path"] = relativize(e.mask_path)
        if e.image_path is not None:
            obj["image_path"] = relativize(e.image_path)
        entries.append(obj)
    doc = {
        "input_resolution": list(manifest.input_resolution),
        "entries": entries,
    }
    if manifest.metadata:
        doc["metadata"] = manifest.metadata
    p.write_text(json.dumps(doc, indent=2) + "\n")
