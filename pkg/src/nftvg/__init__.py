"""Desk-scale temporal video grounding, trained and evaluated end to end.

The package localizes a [t_s, t_e] span in an untrimmed video from a token
query. Visual and text tokens share a cross-modal transformer whose visual
rows attend inside a per-layer window that narrows with depth (widest first);
a two-stage detector then scores one anchor per (frame, scale), zooms into
the top spans by re-sampling their fused features, and refines boundaries.

Layout:

- ``numerics``: reverse-mode autodiff over numpy float64 arrays
- ``attention``: window masks, neighboring/full attention, exact op counts
- ``model``: encoders, cross-modal stack, radius schedule, checkpoints
- ``detection``: anchors, IoU, two-stage heads, ROI sampling
- ``training``: soft-label losses, positive injection, Adam loop
- ``data``: synthetic corpus, feature files, annotations
- ``evaluation``: recall metrics, SNR buckets, attention cost benchmark
- ``estimator``: scikit-learn style fit/predict wrapper
- ``cli``: gen-data / train / eval / bench / inspect commands
"""

from .attention import (
    AttentionParams,
    JointSequence,
    attention_op_count,
    build_mask,
    full_attention,
    neighbor_key_set,
    neighboring_attention,
)
from .data import Annotation, SyntheticSpec, compute_snr, generate_sample
from .detection import Proposal, generate_anchors, iou, zoom_in_detect
from .errors import FormatError, ParseError
from .estimator import TemporalGrounder
from .evaluation import bench_report, make_report, recall_at
from .model import GroundingModel, ModelConfig, RadiusSchedule, derive_schedule
from .numerics import Tensor, finite_diff_check
from .training import Sample, TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "AttentionParams",
    "FormatError",
    "GroundingModel",
    "JointSequence",
    "ModelConfig",
    "ParseError",
    "Proposal",
    "RadiusSchedule",
    "Sample",
    "SyntheticSpec",
    "TemporalGrounder",
    "Tensor",
    "TrainConfig",
    "attention_op_count",
    "bench_report",
    "build_mask",
    "compute_snr",
    "derive_schedule",
    "finite_diff_check",
    "full_attention",
    "generate_anchors",
    "generate_sample",
    "iou",
    "make_report",
    "neighbor_key_set",
    "neighboring_attention",
    "recall_at",
    "train_loop",
    "zoom_in_detect",
]
