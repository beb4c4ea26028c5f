"""Zero-shot 3D anomaly detection on point clouds, desk scale.

Pipeline: multi-view rendering -> feature extraction/caching -> cross-modal
feature alignment (stage 1) -> modality-aware dual-prompt learning
(stage 2) -> fused inference -> exact metrics.
"""

from .errors import (Anomaly3dError, CacheFormatError, ConfigError,
                     EncoderError, GeometryError, MetricError,
                     MissingArtifactError, NumericalOverflowError)

__version__ = "0.1.0"

__all__ = [
    "Anomaly3dError", "CacheFormatError", "ConfigError", "EncoderError",
    "GeometryError", "MetricError", "MissingArtifactError",
    "NumericalOverflowError", "__version__",
]
