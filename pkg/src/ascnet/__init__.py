"""Adversarially constrained dual-decoder anomaly segmentation."""

from .data import ImageSlice, Role, SliceDataset, SynthConfig, synth_generate
from .model import NetworkSpec, build_discriminator, build_main_module, forward_discriminator, forward_main
from .segment import HistogramProfile, SegmentationResult, find_peaks, segment_dataset, segment_slice
from .trainer import TrainingSchedule, run_training

__all__ = [
    "HistogramProfile",
    "ImageSlice",
    "NetworkSpec",
    "Role",
    "SegmentationResult",
    "SliceDataset",
    "SynthConfig",
    "TrainingSchedule",
    "build_discriminator",
    "build_main_module",
    "find_peaks",
    "forward_discriminator",
    "forward_main",
    "run_training",
    "segment_dataset",
    "segment_slice",
    "synth_generate",
]
__version__ = "0.1.0"
