import numpy as np
import pytest
from PIL import Image


def write_png(path, rng, size=(64, 64), gray=False):
    mode = "L" if gray else "RGB"
    channels = 1 if gray else 3
    data = rng.integers(0, 256, (*size, channels), dtype=np.uint8)
    Image.fromarray(data.squeeze(), mode=mode).save(path)


def write_mask_png(path, size=(64, 64), box=(8, 8, 24, 24)):
    """Binary PNG mask with a filled rectangle, MVTec-style 0/255 values."""
    data = np.zeros(size, dtype=np.uint8)
    top, left, bottom, right = box
    data[top:bottom, left:right] = 255
    Image.fromarray(data, mode="L").save(path)


@pytest.fixture(scope="session")
def mvtec_root(tmp_path_factory):
    """A miniature dataset in the MVTec directory convention.

    widget/train/good: 3, test/good: 2, test/scratch: 2 (with masks),
    test/dent: 1 (with mask). Deterministic pixels.
    """
    rng = np.random.default_rng(99)
    root = tmp_path_factory.mktemp("data")
    widget = root / "widget"
    (widget / "train" / "good").mkdir(parents=True)
    (widget / "test" / "good").mkdir(parents=True)
    (widget / "test" / "scratch").mkdir(parents=True)
    (widget / "test" / "dent").mkdir(parents=True)
    (widget / "ground_truth" / "scratch").mkdir(parents=True)
    (widget / "ground_truth" / "dent").mkdir(parents=True)

    for i in range(3):
        write_png(widget / "train" / "good" / f"{i:03d}.png", rng)
    for i in range(2):
        write_png(widget / "test" / "good" / f"{i:03d}.png", rng)
    for i in range(2):
        write_png(widget / "test" / "scratch" / f"{i:03d}.png", rng)
        write_mask_png(
            widget / "ground_truth" / "scratch" / f"{i:03d}_mask.png",
            box=(4 + i, 4, 20 + i, 30),
        )
    write_png(widget / "test" / "dent" / "000.png", rng)
    write_mask_png(widget / "ground_truth" / "dent" / "000_mask.png")
    return root
