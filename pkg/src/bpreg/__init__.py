"""bpreg: self-supervised body part regression for CT volumes."""

__version__ = "0.1.0"

from .augmentation import AugmentationConfig, augment_slice
from .model import ModelConfig, SliceScoreModel, build_model, empty_slice_score, predict_scores
from .phantom import PhantomSpec, generate_phantom_dataset, generate_phantom_volume
from .postprocessing import CleanedScoreCurve, ModelCharacteristics, cleaned_slice_scores
from .training import TrainConfig, derive_schedule, train
from .volumes import PreprocessedVolume, RawVolume, load_volume, preprocess_volume

__all__ = [
    "AugmentationConfig",
    "augment_slice",
    "ModelConfig",
    "SliceScoreModel",
    "build_model",
    "empty_slice_score",
    "predict_scores",
    "PhantomSpec",
    "generate_phantom_dataset",
    "generate_phantom_volume",
    "CleanedScoreCurve",
    "ModelCharacteristics",
    "cleaned_slice_scores",
    "TrainConfig",
    "derive_schedule",
    "train",
    "PreprocessedVolume",
    "RawVolume",
    "load_volume",
    "preprocess_volume",
    "__version__",
]
