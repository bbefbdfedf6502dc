"""Scribble-supervised cell segmentation with EMA-filtered pseudo-labels and
multiscale contrastive regularization.

Modules:
    core        shared value types (grids, label maps, loss configuration)
    losses      scribble/pseudo supervision and the pairwise contrastive term
    pseudolabel EMA tracking, confidence filtering, tri-state downscaling
    model       encoder-decoder network, projection heads, checkpoints
    metrics     IoU / mDice instance scoring and CSV reports
    data        synthetic blob datasets, scribble synthesis, manifests
    trainer     two-stage training loop with deterministic seeding
    cli         `scribseg` command-line entry point
"""

from .core import (
    EmbeddingGrid,
    DownscaledLabelMap,
    FeatureTap,
    ImageGrid,
    Label,
    LossConfig,
    PAIR_OPS,
    PredictionGrid,
    PseudoLabelMap,
    ScaleSpec,
    ScribbleMap,
)
from .losses import (
    contrastive_loss,
    pair_label,
    pseudo_loss,
    sample_pixels,
    scribble_loss,
    supervision_loss,
    total_loss,
)
from .pseudolabel import (
    EmaTracker,
    FilterConfig,
    downscale_labels,
    ema_update,
    filter_pseudo,
    labels_to_raster,
    raster_to_labels,
)
from .model import (
    NetworkConfig,
    ProjectionHead,
    SegmentationNet,
    forward_with_taps,
    load_checkpoint,
    network_from_checkpoint,
    project,
    save_checkpoint,
)
from .metrics import (
    InstanceMap,
    binarize,
    extract_instances,
    iou,
    mdice,
    score_image,
    write_metrics_csv,
)
from .data import (
    DatasetItem,
    DatasetManifest,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    split_folds,
    synthesize_scribbles,
    write_dataset,
)
from .trainer import RunLog, TrainConfig, Trainer, evaluate

__version__ = "0.1.0"

__all__ = [
    "Label",
    "ImageGrid",
    "PredictionGrid",
    "ScribbleMap",
    "PseudoLabelMap",
    "DownscaledLabelMap",
    "FeatureTap",
    "EmbeddingGrid",
    "ScaleSpec",
    "LossConfig",
    "PAIR_OPS",
    "scribble_loss",
    "pseudo_loss",
    "supervision_loss",
    "pair_label",
    "sample_pixels",
    "contrastive_loss",
    "total_loss",
    "EmaTracker",
    "FilterConfig",
    "ema_update",
    "filter_pseudo",
    "downscale_labels",
    "labels_to_raster",
    "raster_to_labels",
    "NetworkConfig",
    "SegmentationNet",
    "ProjectionHead",
    "forward_with_taps",
    "project",
    "save_checkpoint",
    "load_checkpoint",
    "network_from_checkpoint",
    "InstanceMap",
    "iou",
    "mdice",
    "binarize",
    "extract_instances",
    "score_image",
    "write_metrics_csv",
    "SynthConfig",
    "generate_synthetic",
    "synthesize_scribbles",
    "DatasetManifest",
    "DatasetItem",
    "write_dataset",
    "load_dataset",
    "split_folds",
    "TrainConfig",
    "RunLog",
    "Trainer",
    "evaluate",
    "__version__",
]
