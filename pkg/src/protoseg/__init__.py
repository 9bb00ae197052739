"""Prototype-guided multi-modal 3D tumor segmentation."""

from .config import (AugmentPolicy, LossConfig, ModelConfig, PhantomSpec,
                     TrainConfig, MODALITIES, REGIONS)
from .data import MultiModalCase, ModalVolume, load_case, normalize_case, augment_case
from .network import SegmentationNetwork
from .phantom import generate_phantom

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "LossConfig", "ModelConfig", "PhantomSpec", "TrainConfig",
    "MODALITIES", "REGIONS", "MultiModalCase", "ModalVolume", "load_case",
    "normalize_case", "augment_case", "SegmentationNetwork", "generate_phantom",
    "__version__",
]
