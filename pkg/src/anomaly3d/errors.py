"""Exception types shared across the package."""


class Anomaly3dError(Exception):
    """Base class for package errors."""


class GeometryError(Anomaly3dError):
    """Invalid or degenerate geometry input."""


class NumericalOverflowError(Anomaly3dError):
    """A tensor operation produced NaN or Inf."""


class EncoderError(Anomaly3dError):
    """Encoder misuse or incompatible image dimensions."""


class CacheFormatError(Anomaly3dError):
    """Malformed or truncated binary container."""


class ConfigError(Anomaly3dError):
    """Invalid configuration file or value."""


class MissingArtifactError(Anomaly3dError):
    """A pipeline stage requires an artifact that was never produced."""


class MetricError(Anomaly3dError):
    """Metric undefined for the given inputs (e.g. single-class labels)."""
