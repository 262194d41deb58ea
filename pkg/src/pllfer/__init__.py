"""Partial-label training toolkit for expression-style classifiers."""

from .datasets import (
    PartialSample,
    Sample,
    SynthSpec,
    build_candidate_sets_from_reference,
    corrupt_to_partial_labels,
    generate_synthetic_dataset,
    load_image_folder,
    save_dataset,
)
from .hog import HOGParams, hog_descriptor, hog_targets_for_patches
from .metrics import (
    DisambiguationReport,
    Metrics,
    disambiguation_report,
    evaluate,
    export_confusion_plot,
)
from .mim import PatchMask, mim_loss, pretrain_batch_forward, sample_mask
from .model import (
    DecoderConfig,
    EncoderConfig,
    ExpressionModel,
    classifier_probs,
    confidence_response,
)
from .objectives import (
    AnchorSet,
    RevisionConfig,
    anchor_alignment_loss,
    optimal_anchor_positions,
    pll_loss,
    revise_confidence,
    revise_confidence_batch,
    total_finetune_loss,
    uniform_loss,
)
from .store import ConfidenceStore, init_confidence
from .trainer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "ConfidenceStore",
    "DecoderConfig",
    "DisambiguationReport",
    "EncoderConfig",
    "ExpressionModel",
    "HOGParams",
    "Metrics",
    "PartialSample",
    "PatchMask",
    "RevisionConfig",
    "Sample",
    "SynthSpec",
    "TrainConfig",
    "anchor_alignment_loss",
    "build_candidate_sets_from_reference",
    "classifier_probs",
    "confidence_response",
    "corrupt_to_partial_labels",
    "disambiguation_report",
    "evaluate",
    "export_confusion_plot",
    "finetune",
    "generate_synthetic_dataset",
    "hog_descriptor",
    "hog_targets_for_patches",
    "init_confidence",
    "load_checkpoint",
    "load_image_folder",
    "mim_loss",
    "optimal_anchor_positions",
    "pll_loss",
    "pretrain",
    "pretrain_batch_forward",
    "revise_confidence",
    "revise_confidence_batch",
    "sample_mask",
    "save_checkpoint",
    "save_dataset",
    "total_finetune_loss",
    "train_step",
    "uniform_loss",
]
