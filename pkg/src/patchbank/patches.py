"""Aligning multi-scale feature maps into one grid of patch vectors.

The finest scale fixes the patch grid. Coarser maps are bilinearly resized
to that grid (half-pixel centers, edges clamped) and all channels are
concatenated, so patch t carries one column through every scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .featureio import MultiScaleFeatureSet


@dataclass(frozen=True)
class PatchGrid:
    """Concatenated per-patch features, shape (depth, height, width)."""

    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValidationError(
                f"patch grid must be 3-d, got shape {self.features.shape}"
            )

    @property
    def depth(self) -> int:
        return self.features.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def patch_count(self) -> int:
        return self.features.shape[1] * self.features.shape[2]

    def as_points(self) -> np.ndarray:
        """View the grid as (patch_count, depth), row-major over (y, x)."""
        d = self.features.shape[0]
        return self.features.reshape(d, -1).T


def _axis_weights(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Source indices and fractional weights for 1-d linear resampling.

    Output pixel centers are mapped back at half-pixel offsets:
    src = (i + 0.5) * in/out - 0.5, clamped to the valid range. Returns
    (lo, frac) so that out[i] = in[lo[i]] * (1-frac[i]) + in[lo[i]+1] * frac[i].
    """
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.minimum(src.astype(np.int64), max(in_size - 2, 0))
    return lo, src - lo


def bilinear_upsample(tensor: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (channels, h, w) -> (channels, out_h, out_w), float64 output."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3:
        raise ValidationError(f"expected a 3-d tensor, got shape {t.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"invalid output size {out_h}x{out_w}")
    _, in_h, in_w = t.shape
    ylo, yfrac = _axis_weights(in_h, out_h)
    rows = t[:, ylo, :] * (1.0 - yfrac)[None, :, None]
    if in_h > 1:
        rows += t[:, ylo + 1, :] * yfrac[None, :, None]
    xlo, xfrac = _axis_weights(in_w, out_w)
    out = rows[:, :, xlo] * (1.0 - xfrac)[None, None, :]
    if in_w > 1:
        out += rows[:, :, xlo + 1] * xfrac[None, None, :]
    return out


def assemble_patch_grid(feature_set: MultiScaleFeatureSet) -> PatchGrid:
    """Resize every scale to the largest grid and stack channels.

    Scales contribute channels in their stored order. Output is float64;
    a single already-largest scale passes through with unchanged values.
    """
    feature_set.validate()
    grid_h, grid_w = feature_set.grid_shape()
    blocks = []
    for s in feature_set.scales:
        if s.shape[1:] == (grid_h, grid_w):
            blocks.append(np.asarray(s, dtype=np.float64))
        else:
            blocks.append(bilinear_upsample(s, grid_h, grid_w))
    return PatchGrid(features=np.concatenate(blocks, axis=0))


def patch_at(grid: PatchGrid, index: int) -> np.ndarray:
    """The feature vector of patch index t in 1..patch_count (row-major)."""
    if not 1 <= index <= grid.patch_count:
        raise ValidationError(
            f"patch index {index} out of range 1..{grid.patch_count}"
        )
    return grid.as_points()[index - 1]
