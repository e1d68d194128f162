"""Open-vocabulary visual grounding at desk scale.

A backbone-pluggable grounding network (cross-modality fusion encoder,
language-guided feature attention, text-image query selection, cross-modality
decoder, composite loss) together with the matching evaluation protocol,
synthetic-scene training data, and dataset hygiene tooling.
"""

__version__ = "0.1.0"

from ovground.boxes import BBox, NormBox, bbox_to_norm, norm_to_bbox
from ovground.config import ModelConfig, TrainConfig
from ovground.errors import (
    AnnotationError,
    ConfigError,
    InputError,
    ManifestError,
    MatchingError,
)
from ovground.samples import GroundingSample, PLSample

__all__ = [
    "BBox",
    "NormBox",
    "bbox_to_norm",
    "norm_to_bbox",
    "ModelConfig",
    "TrainConfig",
    "GroundingSample",
    "PLSample",
    "ConfigError",
    "InputError",
    "AnnotationError",
    "MatchingError",
    "ManifestError",
]
