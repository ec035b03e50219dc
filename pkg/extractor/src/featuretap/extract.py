"""Orchestration: walk a dataset class, run the backbone, write artifacts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .backbones import FeatureTapper, backbone_spec, build_backbone, weight_fingerprint
from .dataset import ImageRecord, load_image, load_mask, walk_class
from .errors import ConfigError
from .formats import write_feature_file, write_manifest_file, write_mask_file

WEIGHT_MODES = ("pretrained", "random")


@dataclass
class ExtractorConfig:
    """What to run and how images are brought to the network's input size.

    The default pipeline resizes to resize_size squared and center-crops to
    crop_size squared; resize_only skips the crop, making resize_size the
    network input. The effective input must be divisible by 16 so the tap
    ratios (1/4, 1/8, 1/16) stay exact.
    """

    backbone: str = "wide_resnet50_2"
    weights: str = "pretrained"
    resize_size: int = 256
    crop_size: int = 224
    resize_only: bool = False
    device: str = "cpu"
    batch_size: int = 8

    def __post_init__(self):
        backbone_spec(self.backbone)  # raises for unknown names
        if self.weights not in WEIGHT_MODES:
            raise ConfigError(f"weights must be one of {WEIGHT_MODES}, got {self.weights!r}")
        if self.resize_size < 16 or self.crop_size < 16:
            raise ConfigError("resize_size and crop_size must be at least 16")
        if not self.resize_only and self.crop_size > self.resize_size:
            raise ConfigError("crop_size cannot exceed resize_size")
        if self.input_size % 16:
            raise ConfigError(
                f"network input {self.input_size} must be divisible by 16 "
                "for exact 1/4, 1/8, 1/16 feature grids"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    @property
    def input_size(self) -> int:
        return self.resize_size if self.resize_only else self.crop_size

    @property
    def input_resolution(self) -> tuple[int, int]:
        return self.input_size, self.input_size


def _batches(records: list[ImageRecord], size: int):
    for start in range(0, len(records), size):
        yield records[start : start + size]


def extract_class(
    data_root: str | Path,
    class_name: str,
    config: ExtractorConfig,
    out_dir: str | Path,
) -> Path:
    """Extract features for one class; returns the manifest path.

    Layout under out_dir: features/<sample_id>.pbt, masks/<sample_id>.pbt,
    manifest.json. The backbone runs frozen in inference mode, so the same
    inputs and weights always reproduce the same bytes.
    """
    records = walk_class(data_root, class_name)
    spec = backbone_spec(config.backbone)
    model = build_backbone(config.backbone, config.weights == "pretrained", config.device)
    tapper = FeatureTapper(model, spec)
    fingerprint = weight_fingerprint(model)

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    entries = []
    for batch_records in _batches(records, config.batch_size):
        batch = torch.stack(
            [
                load_image(r.image_path, config.resize_size, config.crop_size,
                           config.resize_only)
                for r in batch_records
            ]
        ).to(config.device)
        tapped = tapper(batch)
        for i, record in enumerate(batch_records):
            scales = [t[i].cpu().numpy() for t in tapped]
            feature_rel = f"features/{record.sample_id}.pbt"
            write_feature_file(out / feature_rel, record.sample_id, scales)
            entry = {
                "sample_id": record.sample_id,
                "split": record.split,
                "image_label": record.image_label,
                "feature_path": feature_rel,
                "image_path": record.image_path.resolve().as_posix(),
            }
            if record.mask_path is not None:
                mask = load_mask(record.mask_path, config.resize_size,
                                 config.crop_size, config.resize_only)
                mask_rel = f"masks/{record.sample_id}.pbt"
                write_mask_file(out / mask_rel, record.sample_id, mask)
                entry["mask_path"] = mask_rel
            entries.append(entry)

    metadata = {
        "generator": "featuretap",
        "class_name": class_name,
        "backbone": spec.name,
        "weights": config.weights,
        "weight_sha256": fingerprint,
        "tap_points": [
            {"level": t.level, "module": t.module, "ratio": t.ratio,
             "channels": t.channels}
            for t in spec.taps
        ],
        "input_pipeline": {
            "resize_size": config.resize_size,
            "crop_size": config.crop_size,
            "resize_only": config.resize_only,
        },
        "device": config.device,
    }
    manifest_path = out / "manifest.json"
    write_manifest_file(manifest_path, config.input_resolution, entries, metadata)
    return manifest_path
