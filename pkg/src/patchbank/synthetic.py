"""Deterministic synthetic feature datasets with planted anomalies.

Normal samples draw patch features from a Gaussian mixture whose mode varies
smoothly over the grid (coarse random logits, upsampled, argmax), plus
per-patch noise, plus a per-sample offset confined to a fixed random
low-dimensional subspace. That offset plays the role of nuisance variation
a pretrained feature extractor carries: it inflates distances to the bank
identically for normal and anomalous patches, and a linear descriptor can
learn to annihilate the subspace. Anomalous test samples additionally shift
a rectangular block of patches along a random direction in feature space.

The rectangle is aligned to whole cells of the coarsest scale so every
scale carries the shift exactly and the ground-truth mask marks exactly the
affected receptive cells at input resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .featureio import (
    DatasetManifest,
    ManifestEntry,
    MultiScaleFeatureSet,
    write_feature_set,
    write_manifest,
    write_mask,
)
from .patches import bilinear_upsample


@dataclass
class SyntheticSpec:
    seed: int = 42
    train_count: int = 20
    test_normal_count: int = 10
    test_anomalous_count: int = 10
    scale_channels: tuple[int, ...] = (16, 8)
    scale_grids: tuple[tuple[int, int], ...] = ((16, 16), (8, 8))
    normal_modes: int = 4
    mode_separation: float = 4.0
    patch_noise: float = 0.5
    offset_dims: int = 3
    offset_spread: float = 2.0
    anomaly_shift: float = 5.0
    anomaly_patch_fraction: float = 0.06
    input_upscale: int = 8

    def __post_init__(self):
        self.scale_channels = tuple(self.scale_channels)
        self.scale_grids = tuple(tuple(g) for g in self.scale_grids)
        if min(self.train_count, self.test_normal_count, self.test_anomalous_count) < 1:
            raise ValidationError("sample counts must be at least 1")
        if len(self.scale_channels) != len(self.scale_grids) or not self.scale_channels:
            raise ValidationError("need matching, non-empty channel and grid lists")
        if any(c < 1 for c in self.scale_channels):
            raise ValidationError("channel counts must be positive")
        if any(h < 1 or w < 1 for h, w in self.scale_grids):
            raise ValidationError("grid sizes must be positive")
        big_h, big_w = self.grid_shape
        small_h, small_w = self.coarsest_shape
        for h, w in self.scale_grids:
            if big_h % h or big_w % w or h % small_h or w % small_w:
                raise ValidationError(
                    f"grid {h}x{w} must divide the finest grid and be a multiple "
                    f"of the coarsest"
                )
        if self.normal_modes < 1:
            raise ValidationError("normal_modes must be at least 1")
        if self.anomaly_shift <= 0:
            raise ValidationError("anomaly_shift must be positive")
        if not 0.0 < self.anomaly_patch_fraction < 1.0:
            raise ValidationError("anomaly_patch_fraction must lie in (0, 1)")
        if self.offset_dims < 0 or self.offset_dims > self.total_channels:
            raise ValidationError("offset_dims must lie in 0..total channels")
        if self.input_upscale < 1:
            raise ValidationError("input_upscale must be at least 1")

    @property
    def grid_shape(self) -> tuple[int, int]:
        areas = [h * w for h, w in self.scale_grids]
        return self.scale_grids[int(np.argmax(areas))]

    @property
    def coarsest_shape(self) -> tuple[int, int]:
        areas = [h * w for h, w in self.scale_grids]
        return self.scale_grids[int(np.argmin(areas))]

    @property
    def total_channels(self) -> int:
        return sum(self.scale_channels)

    @property
    def input_resolution(self) -> tuple[int, int]:
        h, w = self.grid_shape
        return h * self.input_upscale, w * self.input_upscale

    def rect_cells(self) -> tuple[int, int]:
        """Planted-square side in finest-grid cells, whole coarsest blocks.

        Raises if the requested fraction covers less than one patch.
        """
        big_h, big_w = self.grid_shape
        side = int(round(np.sqrt(self.anomaly_patch_fraction * big_h * big_w)))
        if side < 1:
            raise ValidationError(
                "anomaly_patch_fraction too small to cover at least one patch"
            )
        block_h = big_h // self.coarsest_shape[0]
        block_w = big_w // self.coarsest_shape[1]
        side_h = min(max(1, round(side / block_h)) * block_h, big_h)
        side_w = min(max(1, round(side / block_w)) * block_w, big_w)
        return side_h, side_w

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad synthetic spec JSON: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown synthetic spec fields: {sorted(extra)}")
        return cls(**obj)


def benchmark_spec(seed: int = 42) -> SyntheticSpec:
    """The fixed configuration the acceptance experiments run on."""
    return SyntheticSpec(seed=seed)


def _orthonormal_columns(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """Random orthonormal (dim, count) basis via Gram-Schmidt (no BLAS)."""
    basis = np.zeros((dim, count))
    made = 0
    while made < count:
        v = rng.standard_normal(dim)
        for j in range(made):
            v -= (basis[:, j] @ v) * basis[:, j]
        norm = np.sqrt(v @ v)
        if norm > 1e-6:
            basis[:, made] = v / norm
            made += 1
    return basis


def _mode_field(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Smooth mode assignment on the coarsest grid, one int per cell."""
    small_h, small_w = spec.coarsest_shape
    logit_h, logit_w = min(4, small_h), min(4, small_w)
    logits = rng.standard_normal((spec.normal_modes, logit_h, logit_w))
    return np.argmax(bilinear_upsample(logits, small_h, small_w), axis=0)


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        depth = spec.total_channels
        self.mode_means = (
            spec.mode_separation / np.sqrt(depth)
        ) * self.rng.standard_normal((spec.normal_modes, depth))
        if spec.offset_dims:
            self.offset_basis = _orthonormal_columns(self.rng, depth, spec.offset_dims)
        else:
            self.offset_basis = np.zeros((depth, 0))
        self.channel_starts = np.r_[0, np.cumsum(spec.scale_channels)]

    def sample(self, anomalous: bool):
        """One sample's scale tensors plus its mask (None when normal)."""
        spec = self.spec
        field_small = _mode_field(self.rng, spec)
        offset = self.offset_basis @ (
            spec.offset_spread * self.rng.standard_normal(spec.offset_dims)
        )
        noises = [
            spec.patch_noise * self.rng.standard_normal((c, h, w))
            for c, (h, w) in zip(spec.scale_channels, spec.scale_grids)
        ]
        mask = None
        rect = None
        direction = np.zeros(spec.total_channels)
        if anomalous:
            big_h, big_w = spec.grid_shape
            side_h, side_w = spec.rect_cells()
            block_h = big_h // spec.coarsest_shape[0]
            block_w = big_w // spec.coarsest_shape[1]
            top = int(self.rng.integers(0, (big_h - side_h) // block_h + 1)) * block_h
            left = int(self.rng.integers(0, (big_w - side_w) // block_w + 1)) * block_w
            rect = (top, left, side_h, side_w)
            direction = self.rng.standard_normal(spec.total_channels)
            direction *= spec.anomaly_shift / np.sqrt(direction @ direction)
            up = spec.input_upscale
            mask = np.zeros(spec.input_resolution, dtype=np.float32)
            mask[top * up : (top + side_h) * up, left * up : (left + side_w) * up] = 1.0

        scales = []
        big_h, big_w = spec.grid_shape
        for i, (channels, (h, w)) in enumerate(zip(spec.scale_channels, spec.scale_grids)):
            lo, hi = self.channel_starts[i], self.channel_starts[i + 1]
            grow_h, grow_w = h // spec.coarsest_shape[0], w // spec.coarsest_shape[1]
            field = np.kron(field_small, np.ones((grow_h, grow_w), dtype=np.int64))
            tensor = self.mode_means[field][:, :, lo:hi].transpose(2, 0, 1).copy()
            tensor += offset[lo:hi, None, None]
            tensor += noises[i]
            if rect is not None:
                top, left, side_h, side_w = rect
                sy = slice(top * h // big_h, (top + side_h) * h // big_h)
                sx = slice(left * w // big_w, (left + side_w) * w // big_w)
                tensor[:, sy, sx] += direction[lo:hi, None, None]
            scales.append(tensor.astype(np.float32))
        return scales, mask


def generate(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write feature files, masks, and manifest.json; returns the manifest.

    Byte-for-byte reproducible: same spec, same files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = _Generator(spec)
    entries = []

    def emit(sample_id: str, split: str, anomalous: bool):
        scales, mask = gen.sample(anomalous)
        feature_path = out / f"{sample_id}.pbt"
        write_feature_set(feature_path, MultiScaleFeatureSet(sample_id, tuple(scales)))
        mask_path = None
        if mask is not None:
            mask_path = out / f"{sample_id}_mask.pbt"
            write_mask(mask_path, mask, sample_id)
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                split=split,
                image_label="anomalous" if anomalous else "normal",
                feature_path=feature_path,
                mask_path=mask_path,
            )
        )

    for i in range(spec.train_count):
        emit(f"train_{i:03d}", "train", False)
    for i in range(spec.test_normal_count):
        emit(f"test_normal_{i:03d}", "test", False)
    for i in range(spec.test_anomalous_count):
        emit(f"test_anomalous_{i:03d}", "test", True)

    manifest = DatasetManifest(
        input_resolution=spec.input_resolution,
        entries=entries,
        metadata={"generator": "synthetic", "seed": spec.seed},
    )
    write_manifest(out / "manifest.json", manifest)
    return manifest
