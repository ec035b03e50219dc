"""Descriptor adaptation against a frozen memory bank.

Each epoch shuffles the train samples with a seeded PRNG, groups them into
batches, averages parameter gradients over each batch, and takes one
optimizer step per batch. The bank never changes. Everything is
deterministic for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import MemoryBank, _load_grid
from .descriptor import (
    DescriptorGrads,
    OptimizerConfig,
    OptimizerState,
    PatchDescriptor,
    embed_backward,
    embed_grid,
    init_optimizer_state,
    optimizer_step,
)
from .errors import ManifestError, NonFiniteLossError
from .featureio import DatasetManifest
from .losses import AdaptationParams, adaptation_loss

LOG_COLUMNS = ("epoch", "l_att", "l_rep", "l_total", "active_att", "active_rep")


@dataclass
class EpochStats:
    """Per-epoch means of the loss terms and active hinge counts."""

    epoch: int
    attract: float
    repel: float
    total: float
    active_attract: float
    active_repel: float


def write_loss_log(path: str | Path, history: list[EpochStats]) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for s in history:
        lines.append(
            f"{s.epoch},{s.attract!r},{s.repel!r},{s.total!r},"
            f"{s.active_attract!r},{s.active_repel!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _check_finite(breakdown, epoch: int, sample_id: str) -> None:
    for term, value in (("attract", breakdown.attract), ("repel", breakdown.repel)):
        if not math.isfinite(value):
            raise NonFiniteLossError(epoch, sample_id, term)


def train(
    manifest: DatasetManifest,
    descriptor: PatchDescriptor,
    bank: MemoryBank,
    params: AdaptationParams,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
) -> tuple[PatchDescriptor, list[EpochStats]]:
    """Adapt the descriptor in place; returns it with the per-epoch log.

    Gradients flow through the loss into the descriptor parameters; the
    neighbor assignments within each forward pass are treated as constant.
    """
    entries = manifest.train_entries
    if not entries:
        raise ManifestError("manifest has no train entries")
    state = init_optimizer_state(descriptor, optimizer or OptimizerConfig())
    rng = np.random.default_rng(seed)
    history: list[EpochStats] = []
    for epoch in range(params.epochs):
        order = rng.permutation(len(entries))
        sums = np.zeros(5)
        for start in range(0, len(order), params.batch_size):
            batch = order[start : start + params.batch_size]
            grad_w = np.zeros(descriptor.weight.shape)
            grad_b = np.zeros(descriptor.bias.shape)
            for pick in batch:
                entry = entries[int(pick)]
                grid = _load_grid(entry)
                embedded = embed_grid(descriptor, grid)
                breakdown, embed_grad = adaptation_loss(embedded, bank, params)
                _check_finite(breakdown, epoch, entry.sample_id)
                grads = embed_backward(descriptor, grid, embed_grad)
                grad_w += grads.weight / len(batch)
                grad_b += grads.bias / len(batch)
                sums += (
                    breakdown.attract,
                    breakdown.repel,
                    breakdown.total,
                    breakdown.active_attract,
                    breakdown.active_repel,
                )
            optimizer_step(descriptor, state, DescriptorGrads(grad_w, grad_b))
        means = sums / len(entries)
        history.append(EpochStats(epoch, *(float(v) for v in means)))
    if log_path is not None:
        write_loss_log(log_path, history)
    return descriptor, history
