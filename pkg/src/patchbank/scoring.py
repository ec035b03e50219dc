"""From embedded test features to anomaly score maps.

Per patch, the distances to its K nearest bank centers form a stack of
heatmaps. The naive score is the nearest distance; the final score weights
it by the softmin certainty of that nearest neighbor, which damps patches
sitting between clusters whose nearness is ambiguous. The patch-resolution
map is then bilinearly upsampled to the input resolution, Gaussian-smoothed
(sigma 4 by default), and min-max normalized for export.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import MemoryBank, nearest_centers
from .descriptor import PatchDescriptor, embed_grid
from .errors import ValidationError
from .patches import PatchGrid, bilinear_upsample


@dataclass
class HeatmapStack:
    """Distance maps, maps[k] = squared distance to the (k+1)-th nearest center."""

    maps: np.ndarray  # (count, h, w)

    def __post_init__(self):
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ValidationError(f"heatmap stack must be (count, h, w), got {self.maps.shape}")
        if np.any(self.maps < 0):
            raise ValidationError("distances cannot be negative")
        if np.any(np.diff(self.maps, axis=0) < 0):
            raise ValidationError("heatmaps must be sorted ascending along the neighbor axis")


@dataclass
class AnomalyScoreMap:
    """One sample's scores at patch resolution and input resolution.

    smoothed is the upsampled and blurred map the image score and all
    evaluation read from; normalized is the per-sample min-max rescale of it,
    meant only for export/visualization.
    """

    raw: np.ndarray
    smoothed: np.ndarray
    normalized: np.ndarray
    image_score: float

    def __post_init__(self):
        if self.raw.ndim != 2 or self.smoothed.shape != self.normalized.shape:
            raise ValidationError("score map shapes are inconsistent")
        if self.normalized.size and (
            self.normalized.min() < 0.0 or self.normalized.max() > 1.0
        ):
            raise ValidationError("normalized scores must lie in [0, 1]")
        if self.image_score != self.smoothed.max():
            raise ValidationError("image_score must equal the smoothed map's maximum")


def build_heatmaps(embedded: np.ndarray, bank: MemoryBank, count: int) -> HeatmapStack:
    """Exact nearest-center distances per patch, laid out spatially."""
    e = np.asarray(embedded, dtype=np.float64)
    if e.ndim != 3:
        raise ValidationError(f"embedded grid must be (depth, h, w), got {e.shape}")
    depth, h, w = e.shape
    _, dists = nearest_centers(e.reshape(depth, -1).T, bank.centers, count)
    return HeatmapStack(maps=dists.T.reshape(count, h, w))


def naive_score(stack: HeatmapStack) -> np.ndarray:
    """Nearest-neighbor distance per patch (elementwise minimum over maps)."""
    return np.min(stack.maps, axis=0)


def certainty_score(stack: HeatmapStack) -> np.ndarray:
    """Nearest distance weighted by its softmin certainty.

    score = min_dist * exp(-min_dist) / sum_k exp(-dist_k), computed with
    the minimum subtracted from every exponent; softmin weights are
    shift-invariant so this is exact, not an approximation.
    """
    nearest = np.min(stack.maps, axis=0)
    weights_sum = np.sum(np.exp(-(stack.maps - nearest[None])), axis=0)
    return nearest / weights_sum


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian, truncated at radius ceil(4*sigma)."""
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_rows(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    radius = len(kernel) // 2
    padded = np.pad(img, ((0, 0), (radius, radius)), mode="symmetric")
    width = img.shape[1]
    out = np.zeros_like(img)
    for i, tap in enumerate(kernel):
        out += tap * padded[:, i : i + width]
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with edge-reflected padding (constants pass through)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"expected a 2-d image, got shape {img.shape}")
    kernel = gaussian_kernel(sigma)
    return _blur_rows(np.ascontiguousarray(_blur_rows(img, kernel).T), kernel).T


def finalize_map(
    raw: np.ndarray, input_resolution: tuple[int, int], sigma: float = 4.0
) -> AnomalyScoreMap:
    """Upsample to input resolution, blur, take the image score, normalize."""
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 2:
        raise ValidationError(f"raw score map must be 2-d, got shape {r.shape}")
    out_h, out_w = input_resolution
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"degenerate resolution {input_resolution}")
    smoothed = gaussian_blur(bilinear_upsample(r[None], out_h, out_w)[0], sigma)
    low, high = smoothed.min(), smoothed.max()
    if high > low:
        normalized = (smoothed - low) / (high - low)
    else:
        normalized = np.zeros_like(smoothed)
    return AnomalyScoreMap(
        raw=r, smoothed=smoothed, normalized=normalized, image_score=float(high)
    )


def score_sample(
    descriptor: PatchDescriptor,
    bank: MemoryBank,
    grid: PatchGrid,
    neighbor_count: int,
    input_resolution: tuple[int, int],
    sigma: float = 4.0,
) -> AnomalyScoreMap:
    """Full scoring pipeline for one sample's patch grid."""
    stack = build_heatmaps(embed_grid(descriptor, grid), bank, neighbor_count)
    return finalize_map(certainty_score(stack), input_resolution, sigma)


def write_pgm(path, normalized: np.ndarray) -> None:
    """8-bit binary PGM of a [0, 1] map (values rounded to 0..255)."""
    m = np.asarray(normalized)
    if m.ndim != 2 or m.size == 0:
        raise ValidationError("PGM export needs a non-empty 2-d map")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValidationError("PGM export expects values in [0, 1]")
    data = np.round(m * 255.0).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())
