"""MVTec-style dataset walking and image preprocessing.

Expected layout under the data root:

    <class>/train/good/*.png
    <class>/test/good/*.png
    <class>/test/<defect>/*.png
    <class>/ground_truth/<defect>/<stem>_mask.png

Walking is fully deterministic: train first, then test defect directories
in sorted order, files sorted within each directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import LayoutError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# standard ImageNet statistics, matching the backbones' pretraining
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ImageRecord:
    sample_id: str
    split: str  # train | test
    image_label: str  # normal | anomalous
    defect: str  # "good" for normal samples
    image_path: Path
    mask_path: Path | None


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def walk_class(data_root: str | Path, class_name: str) -> list[ImageRecord]:
    """Collect every image of one object class with its label and mask."""
    root = Path(data_root) / class_name
    if not root.is_dir():
        raise LayoutError(f"class directory not found: {root}")
    train_good = root / "train" / "good"
    test_dir = root / "test"
    if not train_good.is_dir():
        raise LayoutError(f"missing train/good directory under {root}")
    if not test_dir.is_dir():
        raise LayoutError(f"missing test directory under {root}")

    records = []
    train_files = _image_files(train_good)
    if not train_files:
        raise LayoutError(f"no train images in {train_good}")
    for path in train_files:
        records.append(
            ImageRecord(
                sample_id=f"train_good_{path.stem}",
                split="train",
                image_label="normal",
                defect="good",
                image_path=path,
                mask_path=None,
            )
        )

    defect_dirs = sorted(p for p in test_dir.iterdir() if p.is_dir())
    if not defect_dirs:
        raise LayoutError(f"no test subdirectories in {test_dir}")
    for defect_dir in defect_dirs:
        defect = defect_dir.name
        for path in _image_files(defect_dir):
            if defect == "good":
                mask_path = None
                label = "normal"
            else:
                label = "anomalous"
                mask_path = (
                    root / "ground_truth" / defect / f"{path.stem}_mask{path.suffix}"
                )
                if not mask_path.is_file():
                    raise LayoutError(
                        f"{path}: expected ground-truth mask at {mask_path}"
                    )
            records.append(
                ImageRecord(
                    sample_id=f"test_{defect}_{path.stem}",
                    split="test",
                    image_label=label,
                    defect=defect,
                    image_path=path,
                    mask_path=mask_path,
                )
            )
    if not any(r.split == "test" for r in records):
        raise LayoutError(f"no test images under {test_dir}")
    return records


def _geometry(image: Image.Image, resize_size: int, crop_size: int, resize_only: bool,
              resample) -> Image.Image:
    """The shared resize(+crop) pipeline for images and their masks."""
    if resize_only:
        return image.resize((resize_size, resize_size), resample)
    resized = image.resize((resize_size, resize_size), resample)
    left = (resize_size - crop_size) // 2
    top = (resize_size - crop_size) // 2
    return resized.crop((left, top, left + crop_size, top + crop_size))


def load_image(
    path: str | Path, resize_size: int, crop_size: int, resize_only: bool
) -> torch.Tensor:
    """One image as a normalized float32 (3, H, W) tensor."""
    with Image.open(path) as img:
        rgb = _geometry(img.convert("RGB"), resize_size, crop_size, resize_only,
                        Image.Resampling.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - CHANNEL_MEAN) / CHANNEL_STD
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_mask(
    path: str | Path, resize_size: int, crop_size: int, resize_only: bool
) -> np.ndarray:
    """Ground-truth mask through the same geometry, re-binarized to {0, 1}.

    Nearest-neighbor resampling keeps the values binary, so thresholding
    afterwards only normalizes 255 to 1.
    """
    with Image.open(path) as img:
        gray = _geometry(img.convert("L"), resize_size, crop_size, resize_only,
                         Image.Resampling.NEAREST)
    return (np.asarray(gray) > 0).astype(np.float32)
