class FeatureTapError(Exception):
    """Base class for everything this package raises on purpose."""


class ConfigError(FeatureTapError):
    """Invalid extractor configuration."""


class LayoutError(FeatureTapError):
    """The dataset directory does not follow the expected convention."""


class BackboneError(FeatureTapError):
    """Unknown backbone or a tap point producing unexpected shapes."""
