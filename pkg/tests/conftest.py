import numpy as np
import pytest

from patchbank.featureio import (
    DatasetManifest,
    ManifestEntry,
    MultiScaleFeatureSet,
    write_feature_set,
    write_mask,
)


def random_feature_set(rng, sample_id="sample", scale_shapes=((3, 4, 4), (5, 2, 2))):
    scales = tuple(
        rng.standard_normal(shape).astype(np.float32) for shape in scale_shapes
    )
    return MultiScaleFeatureSet(sample_id=sample_id, scales=scales)


def make_manifest(
    directory,
    rng,
    train=3,
    test_normal=2,
    test_anomalous=2,
    scale_shapes=((3, 4, 4), (5, 2, 2)),
    input_resolution=(8, 8),
    with_masks=True,
):
    """A small on-disk dataset of random features for plumbing tests."""
    entries = []

    def add(sample_id, split, label):
        path = directory / f"{sample_id}.pbt"
        write_feature_set(path, random_feature_set(rng, sample_id, scale_shapes))
        mask_path = None
        if label == "anomalous" and with_masks:
            mask = np.zeros(input_resolution, dtype=np.float32)
            mask[: input_resolution[0] // 2, : input_resolution[1] // 2] = 1.0
            mask_path = directory / f"{sample_id}_mask.pbt"
            write_mask(mask_path, mask, sample_id)
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                split=split,
                image_label=label,
                feature_path=path,
                mask_path=mask_path,
            )
        )

    for i in range(train):
        add(f"train_{i}", "train", "normal")
    for i in range(test_normal):
        add(f"test_n_{i}", "test", "normal")
    for i in range(test_anomalous):
        add(f"test_a_{i}", "test", "anomalous")
    return DatasetManifest(input_resolution=input_resolution, entries=entries)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance gate at the end of the run."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" and "test_acceptance.py" in rep.nodeid:
                name = rep.nodeid.split("::")[-1]
                lines.append((name, "PASS" if rep.passed else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance gates")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}")
