"""Hinge losses that pull patch embeddings onto the memorized normal
features and push them off the next-nearest ("hard negative") centers.

Distances are squared Euclidean. For each patch the K nearest centers are
attractors and the following J centers are repellers; both neighbor sets are
recomputed on every forward pass since the embedding moves under training.
Gradients are with respect to the embedding; the hinge subgradient at the
kink is zero and the neighbor selection is treated as constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import MemoryBank, _as_points, nearest_centers
from .errors import ValidationError

REP_MARGIN_MODES = ("as-written", "non-degenerate")


@dataclass
class AdaptationParams:
    """Loss and schedule hyperparameters for descriptor adaptation.

    radius is the attraction target r (losses compare squared
    distances against radius**2); margin is the repulsion slack. In
    "as-written" mode the repulsion hinge is max(0, r^2 - dist - margin),
    which is identically zero whenever margin >= r^2 (true for the
    defaults); "non-degenerate" flips the margin's sign into
    max(0, r^2 + margin - dist) so hard negatives inside the margin are
    actually pushed away.
    """

    radius: float = 1e-5
    margin: float = 1e-1
    attract_neighbors: int = 3
    repel_neighbors: int = 3
    epochs: int = 30
    batch_size: int = 4
    rep_margin_mode: str = "non-degenerate"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValidationError("radius must be positive")
        if self.attract_neighbors < 1 or self.repel_neighbors < 1:
            raise ValidationError("neighbor counts must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be at least 1")
        if self.rep_margin_mode not in REP_MARGIN_MODES:
            raise ValidationError(
                f"rep_margin_mode must be one of {REP_MARGIN_MODES}, "
                f"got {self.rep_margin_mode!r}"
            )


@dataclass
class LossBreakdown:
    attract: float
    repel: float
    total: float
    active_attract: int
    active_repel: int


def _grid_points(embedded: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    e = np.asarray(embedded, dtype=np.float64)
    if e.ndim != 3:
        raise ValidationError(f"embedded grid must be (depth, h, w), got {e.shape}")
    return _as_points(e), e.shape


def _to_grid(point_grads: np.ndarray, shape) -> np.ndarray:
    return point_grads.T.reshape(shape)


def _attraction_terms(points, centers, idx, dists, params):
    """Hinge values and embedding gradients for the attraction side."""
    count = points.shape[0] * idx.shape[1]
    excess = dists - params.radius**2
    active = excess > 0
    value = float(np.maximum(excess, 0.0).sum() / count)
    diff = points[:, None, :] - centers[idx]
    grads = (2.0 / count) * np.sum(diff * active[:, :, None], axis=1)
    return value, grads, int(active.sum())


def _repulsion_terms(points, centers, idx, dists, params):
    count = points.shape[0] * idx.shape[1]
    if params.rep_margin_mode == "as-written":
        arg = params.radius**2 - dists - params.margin
    else:
        arg = params.radius**2 + params.margin - dists
    active = arg > 0
    value = float(np.maximum(arg, 0.0).sum() / count)
    diff = points[:, None, :] - centers[idx]
    grads = (-2.0 / count) * np.sum(diff * active[:, :, None], axis=1)
    return value, grads, int(active.sum())


def attraction_loss(
    embedded: np.ndarray, bank: MemoryBank, params: AdaptationParams
) -> tuple[float, np.ndarray, int]:
    """Mean hinge over the K nearest centers per patch.

    Returns (value, gradient w.r.t. the embedded grid, active term count).
    """
    points, shape = _grid_points(embedded)
    idx, dists = nearest_centers(points, bank.centers, params.attract_neighbors)
    value, grads, active = _attraction_terms(points, bank.centers, idx, dists, params)
    return value, _to_grid(grads, shape), active


def repulsion_loss(
    embedded: np.ndarray, bank: MemoryBank, params: AdaptationParams
) -> tuple[float, np.ndarray, int]:
    """Mean hinge over the J centers after the K nearest (the hard negatives)."""
    points, shape = _grid_points(embedded)
    take = params.attract_neighbors + params.repel_neighbors
    idx, dists = nearest_centers(points, bank.centers, take)
    hard_idx = idx[:, params.attract_neighbors :]
    hard_d = dists[:, params.attract_neighbors :]
    value, grads, active = _repulsion_terms(points, bank.centers, hard_idx, hard_d, params)
    return value, _to_grid(grads, shape), active


def adaptation_loss(
    embedded: np.ndarray, bank: MemoryBank, params: AdaptationParams
) -> tuple[LossBreakdown, np.ndarray]:
    """Both hinge losses from one neighbor search; gradients summed."""
    points, shape = _grid_points(embedded)
    near = params.attract_neighbors
    idx, dists = nearest_centers(points, bank.centers, near + params.repel_neighbors)
    att_value, att_grads, att_active = _attraction_terms(
        points, bank.centers, idx[:, :near], dists[:, :near], params
    )
    rep_value, rep_grads, rep_active = _repulsion_terms(
        points, bank.centers, idx[:, near:], dists[:, near:], params
    )
    breakdown = LossBreakdown(
        attract=att_value,
        repel=rep_value,
        total=att_value + rep_value,
        active_attract=att_active,
        active_repel=rep_active,
    )
    return breakdown, _to_grid(att_grads + rep_grads, shape)
