"""Prompt tuning for a frozen dual video-text encoder, regularized by
generic attribute anchors, on a synthetic spurious-correlation benchmark."""

from .anchors import (
    AnchorSet,
    build_anchor_prompt,
    filter_anchor_labels,
    sample_anchor_videos,
)
from .backbone import DualEncoder, EncoderConfig, TokenSequence, VideoClip, Vocab, patchify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config
from .data import (
    ClipDataset,
    ClipRecord,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_manifest,
    sample_frames,
)
from .evaluation import (
    EvalReport,
    EvalResult,
    SplitSpec,
    evaluate,
    export_embeddings,
    few_shot_select,
    harmonic_mean,
    split_base_novel,
)
from .losses import LossConfig, anchor_loss, class_probabilities, task_loss, total_loss
from .prompting import CouplingSpec, PromptBank, class_text_features
from .training import (
    ModelScorer,
    TrainConfig,
    pretrain_backbone,
    pretrain_hard_prompts,
    run_training,
    training_step,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "build_anchor_prompt", "filter_anchor_labels",
    "sample_anchor_videos", "DualEncoder", "EncoderConfig", "TokenSequence",
    "VideoClip", "Vocab", "patchify", "load_checkpoint", "save_checkpoint",
    "Config", "ConfigError", "load_config", "ClipDataset", "ClipRecord",
    "SyntheticSpec", "generate_synthetic_dataset", "load_manifest",
    "sample_frames", "EvalReport", "EvalResult", "SplitSpec", "evaluate",
    "export_embeddings", "few_shot_select", "harmonic_mean",
    "split_base_novel", "LossConfig", "anchor_loss", "class_probabilities",
    "task_loss", "total_loss", "CouplingSpec", "PromptBank",
    "class_text_features", "ModelScorer", "TrainConfig", "pretrain_backbone",
    "pretrain_hard_prompts", "run_training", "training_step",
    "__version__",
]
