"""Command-line entry point.

    featuretap extract --data ROOT --class NAME --backbone B --out DIR
"""

from __future__ import annotations

import argparse
import sys

from .backbones import BACKBONES
from .errors import FeatureTapError
from .extract import WEIGHT_MODES, ExtractorConfig, extract_class


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featuretap",
        description="Export multi-scale CNN backbone features for anomaly scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract one object class to feature files")
    p.add_argument("--data", required=True, help="dataset root (MVTec layout)")
    p.add_argument("--class", dest="class_name", required=True,
                   help="object class directory name")
    p.add_argument("--backbone", default="wide_resnet50_2",
                   choices=sorted(BACKBONES))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights", default="pretrained", choices=WEIGHT_MODES,
                   help="pretrained zoo weights or a random initialization")
    p.add_argument("--resize", type=int, default=256, help="square resize size")
    p.add_argument("--crop", type=int, default=224, help="square center-crop size")
    p.add_argument("--resize-only", action="store_true",
                   help="skip the center crop; the resize size becomes the input")
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch", type=int, default=8)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(
            backbone=args.backbone,
            weights=args.weights,
            resize_size=args.resize,
            crop_size=args.crop,
            resize_only=args.resize_only,
            device=args.device,
            batch_size=args.batch,
        )
        manifest = extract_class(args.data, args.class_name, config, args.out)
    except FeatureTapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
