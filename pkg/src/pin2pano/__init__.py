"""pin2pano: unsupervised pinhole-to-panoramic domain adaptation for
semantic segmentation.

A miniature, fully testable adversarial adaptation workbench: synthetic
paired-domain spherical scenes, compact attention-equipped segmentation
networks, multi-level adversarial alignment (output-space, attention-
reweighted, and region-context mechanisms), an alternating training loop
with polynomial LR decay, and IoU-based evaluation with gap reporting.
"""

from .palette import CLASS_NAMES, IGNORE_INDEX, NUM_CLASSES
from .scene import (
    CameraSpec,
    Sample,
    SphericalScene,
    direction_to_pixel,
    generate_scene,
    load_labeled_pair,
    pixel_to_direction,
    render,
)
from .attention import AttentionConfig, ChannelAttention, FastAttention, PositionAttention
from .segnet import ForwardTaps, Segmenter, SegmenterConfig, init_segmenter, seg_loss
from .adapt import (
    DASiteConfig,
    Discriminator,
    RegionDecision,
    adam_reweight,
    adv_loss,
    d_loss,
    rcb,
    rcdam,
    rib,
    sdam,
)
from .train import TrainConfig, TrainState, generator_total_loss, poly_lr, run_training, train_step
from .evalreport import (
    ConfusionMatrix,
    EvalReport,
    evaluate_model,
    gap_report,
    mean_iou,
    per_class_iou,
    update_confusion,
)
from .config import ConfigError, RunConfig, validate_config

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "IGNORE_INDEX",
    "NUM_CLASSES",
    "CameraSpec",
    "Sample",
    "SphericalScene",
    "generate_scene",
    "pixel_to_direction",
    "direction_to_pixel",
    "render",
    "load_labeled_pair",
    "AttentionConfig",
    "PositionAttention",
    "ChannelAttention",
    "FastAttention",
    "SegmenterConfig",
    "Segmenter",
    "ForwardTaps",
    "init_segmenter",
    "seg_loss",
    "DASiteConfig",
    "Discriminator",
    "RegionDecision",
    "d_loss",
    "adv_loss",
    "sdam",
    "adam_reweight",
    "rcb",
    "rib",
    "rcdam",
    "TrainConfig",
    "TrainState",
    "poly_lr",
    "generator_total_loss",
    "train_step",
    "run_training",
    "ConfusionMatrix",
    "update_confusion",
    "per_class_iou",
    "mean_iou",
    "EvalReport",
    "evaluate_model",
    "gap_report",
    "ConfigError",
    "RunConfig",
    "validate_config",
]
