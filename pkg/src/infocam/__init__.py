"""Class activation maps, information-refined variants, and weakly
supervised object localization, with a minimal trainable CNN and a
deterministic double-digit dataset generator."""

from .arrayio import (
    ArrayIOError,
    BadMagicError,
    Manifest,
    ManifestError,
    NonFiniteDataError,
    TruncatedPayloadError,
    UnsupportedFormatError,
    load_manifest,
    read_array,
    save_manifest,
    write_array,
)
from .boxes import (
    Box,
    LocalizationResult,
    bounding_box,
    evaluate,
    iou,
    largest_component,
    threshold_mask,
    to_image_space,
)
from .maps import (
    ClassifierHead,
    FeatureStack,
    IntensityMap,
    RegionSpec,
    box_filter,
    cam,
    estimate_mi,
    infocam,
    infocam_plus,
    logits,
    multilabel_infocam,
    pmi,
)
from .nn import (
    Network,
    NumericError,
    TrainConfig,
    default_network,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayIOError", "BadMagicError", "Manifest", "ManifestError",
    "NonFiniteDataError", "TruncatedPayloadError", "UnsupportedFormatError",
    "load_manifest", "read_array", "save_manifest", "write_array",
    "Box", "LocalizationResult", "bounding_box", "evaluate", "iou",
    "largest_component", "threshold_mask", "to_image_space",
    "ClassifierHead", "FeatureStack", "IntensityMap", "RegionSpec",
    "box_filter", "cam", "estimate_mi", "infocam", "infocam_plus", "logits",
    "multilabel_infocam", "pmi",
    "Network", "NumericError", "TrainConfig", "default_network", "gradcheck",
    "load_checkpoint", "save_checkpoint", "train",
    "__version__",
]
