"""Image- and pixel-level metrics plus whole-test-split evaluation.

AUROC is the Mann-Whitney rank statistic with midrank tie handling, which
equals the trapezoid-integrated ROC exactly; the pixel variant pools every
pixel of every test sample (normal images contribute all-negative pixels).
F1 threshold selection sweeps the observed score values only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .bank import MemoryBank, _load_grid
from .descriptor import PatchDescriptor
from .errors import EvaluationError, ManifestError, ValidationError
from .featureio import DatasetManifest, read_mask
from .losses import AdaptationParams
from .scoring import AnomalyScoreMap, score_sample


@dataclass
class RocResult:
    auroc: float
    thresholds: np.ndarray  # descending candidate thresholds
    tpr: np.ndarray
    fpr: np.ndarray


@dataclass
class EvalReport:
    class_name: str
    image_auroc: float  # percent
    pixel_auroc: float  # percent
    f1: float
    threshold: float
    sample_counts: dict[str, int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return labels.astype(bool)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    n = len(values)
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_values)) + 1]
    ends = np.r_[starts[1:], n]
    averages = (starts + 1 + ends) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(averages, ends - starts)
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> RocResult:
    """Exact AUROC (rank statistic) plus the threshold-swept ROC points."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _check_binary_labels(np.asarray(labels).ravel())
    if s.shape != y.shape:
        raise ValidationError("scores and labels must have equal length")
    positives = int(y.sum())
    negatives = int(len(y) - positives)
    if positives == 0 or negatives == 0:
        raise EvaluationError("AUROC needs both classes present")
    ranks = _midranks(s)
    u_stat = ranks[y].sum() - positives * (positives + 1) / 2.0
    area = u_stat / (positives * negatives)

    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    run_ends = np.r_[np.flatnonzero(np.diff(sorted_scores)), len(s) - 1]
    cum_tp = np.cumsum(y[order])[run_ends]
    predicted = run_ends + 1
    return RocResult(
        auroc=float(area),
        thresholds=sorted_scores[run_ends],
        tpr=cum_tp / positives,
        fpr=(predicted - cum_tp) / negatives,
    )


def pixel_auroc(score_maps: Sequence, masks: Sequence[np.ndarray]) -> RocResult:
    """AUROC over the pooled pixels of many (map, mask) pairs."""
    if len(score_maps) != len(masks):
        raise ValidationError("need one mask per score map")
    pooled_scores, pooled_labels = [], []
    for i, (score_map, mask) in enumerate(zip(score_maps, masks)):
        values = score_map.smoothed if isinstance(score_map, AnomalyScoreMap) else score_map
        values = np.asarray(values, dtype=np.float64)
        m = np.asarray(mask)
        if values.shape != m.shape:
            raise ValidationError(
                f"pair {i}: map shape {values.shape} != mask shape {m.shape}"
            )
        pooled_scores.append(values.ravel())
        pooled_labels.append(_check_binary_labels(m.ravel()))
    return auroc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))


def f1_threshold(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Best F1 over thresholds drawn from the observed scores.

    Predictions are score >= threshold; ties on F1 pick the lower threshold.
    Needs at least one positive label (F1 is undefined without positives;
    an all-positive input is fine and yields F1 = 1 at the minimum score).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _check_binary_labels(np.asarray(labels).ravel())
    if s.shape != y.shape:
        raise ValidationError("scores and labels must have equal length")
    positives = int(y.sum())
    if positives == 0:
        raise EvaluationError("F1 sweep needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    run_ends = np.r_[np.flatnonzero(np.diff(sorted_scores)), len(s) - 1]
    tp = np.cumsum(y[order])[run_ends]
    predicted = run_ends + 1
    f1 = 2.0 * tp / (predicted + positives)  # == 2tp / (2tp + fp + fn)
    best = len(f1) - 1 - int(np.argmax(f1[::-1]))
    return float(sorted_scores[run_ends][best]), float(f1[best])


def score_test_split(
    manifest: DatasetManifest,
    descriptor: PatchDescriptor,
    bank: MemoryBank,
    params: AdaptationParams,
    sigma: float = 4.0,
) -> tuple[list[AnomalyScoreMap], list[int], list[np.ndarray]]:
    """Score every test entry; returns (maps, image labels, pixel masks).

    Normal samples get all-zero masks. Anomalous samples without a mask
    path get a None placeholder and are skipped by pixel pooling.
    """
    entries = manifest.test_entries
    if not entries:
        raise ManifestError("manifest has no test entries")
    maps, labels, masks = [], [], []
    for entry in entries:
        grid = _load_grid(entry)
        maps.append(
            score_sample(
                descriptor, bank, grid, params.attract_neighbors,
                manifest.input_resolution, sigma,
            )
        )
        anomalous = entry.image_label == "anomalous"
        labels.append(int(anomalous))
        if not anomalous:
            masks.append(np.zeros(manifest.input_resolution))
        elif entry.mask_path is None:
            masks.append(None)
        else:
            mask = read_mask(entry.mask_path)
            if mask.shape != manifest.input_resolution:
                raise ManifestError(
                    f"{entry.mask_path}: mask shape {mask.shape} does not match "
                    f"input resolution {manifest.input_resolution}"
                )
            masks.append(mask)
    return maps, labels, masks


def report_from_split(
    manifest: DatasetManifest,
    class_name: str,
    maps: list[AnomalyScoreMap],
    labels: list[int],
    masks: list[np.ndarray],
) -> tuple[EvalReport, RocResult, RocResult]:
    """Metrics over already-scored test samples.

    Returns the report plus the image- and pixel-level ROC curves. The F1
    threshold is swept over the pooled pixel scores, consistent with the
    pixel AUROC.
    """
    image_roc = auroc([m.image_score for m in maps], labels)
    with_masks = [(m, k) for m, k in zip(maps, masks) if k is not None]
    pixel_roc = pixel_auroc([m for m, _ in with_masks], [k for _, k in with_masks])
    pooled = np.concatenate([m.smoothed.ravel() for m, _ in with_masks])
    pooled_labels = np.concatenate([k.ravel() for _, k in with_masks]).astype(int)
    threshold, f1 = f1_threshold(pooled, pooled_labels)
    counts: dict[str, int] = {}
    for entry in manifest.entries:
        key = f"{entry.split}_{entry.image_label}"
        counts[key] = counts.get(key, 0) + 1
    report = EvalReport(
        class_name=class_name,
        image_auroc=100.0 * image_roc.auroc,
        pixel_auroc=100.0 * pixel_roc.auroc,
        f1=f1,
        threshold=threshold,
        sample_counts=counts,
    )
    return report, image_roc, pixel_roc


def evaluate_class(
    manifest: DatasetManifest,
    descriptor: PatchDescriptor,
    bank: MemoryBank,
    params: AdaptationParams,
    class_name: str = "",
    sigma: float = 4.0,
) -> EvalReport:
    """Image AUROC, pooled-pixel AUROC, and the pixel F1 threshold."""
    maps, labels, masks = score_test_split(manifest, descriptor, bank, params, sigma)
    return report_from_split(manifest, class_name, maps, labels, masks)[0]


def write_report(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(report.to_json())


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())


def write_roc_csv(path: str | Path, result: RocResult) -> None:
    lines = ["threshold,tpr,fpr"]
    for t, tp, fp in zip(result.thresholds, result.tpr, result.fpr):
        lines.append(f"{float(t)!r},{float(tp)!r},{float(fp)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
