"""Synthetic dense-object video generation and multi-task segmentation."""

from .data import ClipManifest, Sample, group_split, load_manifest, save_manifest
from .diffusion import LevelScheduler, VarianceSchedule, forward_diffuse, make_schedule
from .metrics import MetricReport, dice_iou, evaluate, predict_and_overlay
from .model import DiffUNet, NetworkConfig, load_checkpoint, save_checkpoint
from .synth import CutoutBank, SynthConfig, synthesize_clip, synthesize_frames
from .train import AugmentConfig, TrainConfig, augment_sample, fit_phase, fit_two_phase

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ClipManifest", "CutoutBank", "DiffUNet", "LevelScheduler",
    "MetricReport", "NetworkConfig", "Sample", "SynthConfig", "TrainConfig",
    "VarianceSchedule", "augment_sample", "dice_iou", "evaluate", "fit_phase",
    "fit_two_phase", "forward_diffuse", "group_split", "load_checkpoint",
    "load_manifest", "make_schedule", "predict_and_overlay", "save_checkpoint",
    "save_manifest", "synthesize_clip", "synthesize_frames",
]
