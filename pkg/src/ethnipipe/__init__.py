"""Face-image ethnicity classification pipeline.

Preprocess face photos (detect, crop, resize, denoise), manage stratified
fold splits with noisy-duplicate class balancing, fine-tune a VGG-16-based
classifier with SGD, and report per-class/total accuracy with confusion
matrices. See the ``ethnipipe`` command for the end-to-end workflow.
"""

from .dataset import (
    CLASS_NAMES,
    NUM_CLASSES,
    EthnicLabel,
    Manifest,
    SampleRecord,
    SplitPlan,
    balance_classes,
    ingest_directory,
    kfold_split,
)
from .errors import (
    ConfigError,
    DetectorLoadError,
    EthnipipeError,
    FormatError,
    MissingInputError,
)
from .model import ModelSpec, ModelState, build_model_spec, build_surrogate_spec
from .preprocess import preprocess_pipeline
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "ConfigError",
    "DetectorLoadError",
    "EthnicLabel",
    "EthnipipeError",
    "FormatError",
    "Manifest",
    "MissingInputError",
    "ModelSpec",
    "ModelState",
    "SampleRecord",
    "SplitPlan",
    "TrainConfig",
    "TrainLog",
    "balance_classes",
    "build_model_spec",
    "build_surrogate_spec",
    "ingest_directory",
    "kfold_split",
    "preprocess_pipeline",
    "train",
    "__version__",
]
