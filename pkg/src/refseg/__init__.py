"""Toy referring-image-segmentation lab.

Synthetic shape scenes with unambiguous referring expressions, tiny
four-stage language/image encoders, bidirectional cross-modal fusion,
grounded masked-token prediction, and pixel-text alignment losses --
everything small enough that each equation is unit-testable end to end.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .data import Sample, SceneSpec, generate_dataset, mask_centroid
from .estimator import ReferringSegmenter
from .losses import LossBundle, PixelPartition, bce_loss, cal_p2p, cal_p2t, dice_loss, total_loss
from .metrics import MetricsReport, alignment_probe, compute_metrics
from .model import ModelConfig, RefSegNet
from .vocab import Vocabulary, build_vocabulary, detokenize, tokenize

__all__ = [
    "ExperimentConfig",
    "Sample",
    "SceneSpec",
    "generate_dataset",
    "mask_centroid",
    "ReferringSegmenter",
    "LossBundle",
    "PixelPartition",
    "bce_loss",
    "cal_p2p",
    "cal_p2t",
    "dice_loss",
    "total_loss",
    "MetricsReport",
    "alignment_probe",
    "compute_metrics",
    "ModelConfig",
    "RefSegNet",
    "Vocabulary",
    "build_vocabulary",
    "detokenize",
    "tokenize",
    "__version__",
]
