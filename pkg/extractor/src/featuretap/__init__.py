"""featuretap: frozen-CNN feature export in the patchbank file format."""

from .backbones import (
    BACKBONES,
    BackboneSpec,
    FeatureTapper,
    TapPoint,
    backbone_spec,
    build_backbone,
    weight_fingerprint,
)
from .dataset import ImageRecord, load_image, load_mask, walk_class
from .errors import BackboneError, ConfigError, FeatureTapError, LayoutError
from .extract import ExtractorConfig, extract_class
from .formats import write_feature_file, write_manifest_file, write_mask_file

__version__ = "0.1.0"

__all__ = [
    "BACKBONES",
    "BackboneError",
    "BackboneSpec",
    "ConfigError",
    "ExtractorConfig",
    "FeatureTapError",
    "FeatureTapper",
    "ImageRecord",
    "LayoutError",
    "TapPoint",
    "backbone_spec",
    "build_backbone",
    "extract_class",
    "load_image",
    "load_mask",
    "walk_class",
    "weight_fingerprint",
    "write_feature_file",
    "write_manifest_file",
    "write_mask_file",
    "__version__",
]
