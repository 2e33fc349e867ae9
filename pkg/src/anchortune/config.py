"""Flat key-value experiment configuration.

Config files are plain text, one ``section.key = value`` per line, ``#``
comments allowed. Precedence is defaults < config file < command-line
overrides (last wins). Unknown keys and type mismatches are rejected so a
snapshot always round-trips through the same schema.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or malformed config files."""


@dataclass(frozen=True)
class Field:
    type: type
    default: Any
    help: str
    choices: tuple | None = None


def _opt_str(v: str) -> str:
    return v


# Schema: every key the pipeline understands, with defaults forming the
# desk-scale benchmark preset. "" means unset for optional path values.
SCHEMA: dict[str, Field] = {
    # global run seed: training stochasticity, anchor selection, eval subsampling
    "seed": Field(int, 0, "run seed for training, anchor sampling and eval subsampling"),
    # synthetic dataset
    "data.root": Field(str, "runs/dataset", "dataset directory (manifest.jsonl + clips/)"),
    "data.seed": Field(int, 7, "dataset generation seed (independent of run seed)"),
    "data.n_classes": Field(int, 16, "number of task classes (base + novel)"),
    "data.clips_per_class": Field(int, 16, "training clips generated per task class"),
    "data.val_clips_per_class": Field(int, 12, "validation clips per task class"),
    "data.anchor_kinds": Field(int, 8, "held-out motion kinds reserved for anchor clips"),
    "data.anchor_clips_per_kind": Field(int, 8, "anchor pool clips per anchor kind"),
    "data.pretrain_kinds": Field(int, 8, "motion kinds for the hard-prompt source split"),
    "data.pretrain_clips_per_kind": Field(int, 16, "training clips per hard-prompt source class"),
    "data.pretrain_val_clips_per_kind": Field(int, 2, "validation clips per hard-prompt source class"),
    "data.backbone_clips_per_kind": Field(int, 8, "caption-supervised clips per kind for backbone pre-training"),
    "data.distractor_clips": Field(int, 32, "nameless leftover-kind clips paired with the generic caption during backbone pre-training"),
    "data.frames": Field(int, 8, "frames per generated clip"),
    "data.frame_size": Field(int, 32, "square frame edge in pixels"),
    "data.background_kinds": Field(int, 8, "number of distinct background patterns"),
    "data.rho": Field(float, 0.9, "background-class correlation on the base split"),
    "data.noise_sigma": Field(float, 0.02, "per-pixel Gaussian noise sigma"),
    # encoder geometry
    "encoder.visual_layers": Field(int, 4, "visual transformer depth"),
    "encoder.text_layers": Field(int, 4, "text transformer depth"),
    "encoder.d_v": Field(int, 64, "visual width"),
    "encoder.d_t": Field(int, 64, "text width"),
    "encoder.d_joint": Field(int, 32, "joint embedding width"),
    "encoder.patch_size": Field(int, 8, "square patch edge in pixels"),
    "encoder.heads": Field(int, 4, "attention heads"),
    "encoder.context_length": Field(int, 32, "maximum text sequence length"),
    # backbone pre-training (the in-repo stand-in for a pretrained dual encoder)
    "backbone.checkpoint": Field(str, "", "path to a backbone checkpoint; built there when missing"),
    "backbone.seed": Field(int, 1234, "backbone init + pre-training seed"),
    "backbone.epochs": Field(int, 120, "backbone pre-training epochs; first half is the kind-only curriculum"),
    "backbone.batch_size": Field(int, 64, "backbone pre-training batch size"),
    "backbone.learning_rate": Field(float, 1e-3, "backbone pre-training AdamW peak lr"),
    "backbone.weight_decay": Field(float, 1e-4, "backbone AdamW weight decay (matrix weights only)"),
    "backbone.tau": Field(float, 0.3, "softmax temperature for backbone pre-training"),
    # hard prompt pre-training
    "hard.checkpoint": Field(str, "", "path to a hard-prompt checkpoint; pretrain-hard writes here"),
    "hard.seed": Field(int, 4321, "hard-prompt pre-training seed"),
    "hard.epochs": Field(int, 5, "hard-prompt pre-training epochs"),
    "hard.source": Field(str, "pretrained", "where the hard prompt comes from",
                         choices=("pretrained", "random")),
    # prompt bank
    "prompt.text_len": Field(int, 8, "soft text prompt length (hard prompts share it)"),
    "prompt.visual_len": Field(int, 4, "soft visual prompt length"),
    "prompt.depth_text": Field(int, 3, "text layers receiving prompts"),
    "prompt.depth_visual": Field(int, 3, "visual layers receiving prompts"),
    "prompt.coupling": Field(
        str, "nonlinear", "hard/soft coupling variant",
        choices=("nonlinear", "linear", "additive", "connection_position", "random_position", "none"),
    ),
    "prompt.dropout": Field(float, 0.1, "coupling projector dropout rate (train mode only)"),
    "prompt.coupling_seed": Field(int, 99, "layout seed for the random_position variant"),
    # loss
    "loss.tau": Field(float, 0.07, "softmax temperature"),
    "loss.omega": Field(float, 1.0, "anchor loss weight"),
    "loss.combine": Field(str, "additive_appendix", "loss combination form",
                          choices=("convex_eq10", "additive_appendix")),
    "loss.regularizer": Field(str, "cross_entropy", "anchor regularizer form",
                              choices=("cross_entropy", "margin")),
    "loss.margin_lambda": Field(float, 0.1, "margin regularizer scale (margin form only)"),
    "loss.margin": Field(float, 0.2, "margin threshold (margin form only)"),
    "loss.anchor_candidates": Field(str, "prompts_plus_classes", "candidate set for the anchor loss",
                                    choices=("prompts_plus_classes", "prompts_only")),
    # main training
    "train.epochs": Field(int, 10, "main prompt-tuning epochs"),
    "train.batch_size": Field(int, 16, "task clips per step"),
    "train.anchor_batch_size": Field(int, -1, "anchor clips per step; -1 means batch_size // 8"),
    "train.learning_rate": Field(float, 2e-2, "AdamW learning rate"),
    "train.weight_decay": Field(float, 1e-3, "AdamW weight decay"),
    "train.schedule": Field(str, "cosine", "lr schedule", choices=("cosine", "constant")),
    "train.shots": Field(int, 16, "labeled clips per class used for tuning"),
    "train.grad_clip": Field(float, 1.0, "global gradient-norm clip (0 disables)"),
    "train.frames": Field(int, 8, "frames sampled per clip at train/eval time"),
    # anchors
    "anchors.k": Field(int, 32, "anchor clips sampled for training (0 disables anchors)"),
    "anchors.matcher": Field(str, "rule", "label matcher for anchor curation", choices=("rule", "llm")),
    # evaluation
    "eval.protocol": Field(str, "base_to_novel", "evaluation protocol",
                           choices=("base_to_novel", "few_shot", "zero_shot", "full")),
    "eval.split_seed": Field(int, 0, "seed recorded on the class split (rule-based split ignores it)"),
    "eval.batch_size": Field(int, 32, "clips scored per forward pass"),
    "eval.embedding_limit": Field(int, 500, "max exported embedding rows per split"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str) -> Any:
    field = SCHEMA[key]
    if field.type is bool:
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        value = field.type(raw.strip()) if field.type is not str else raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {field.type.__name__}, got {raw!r}") from exc
    if field.choices is not None and value not in field.choices:
        raise ConfigError(f"{key}: {value!r} not in {field.choices}")
    return value


class Config:
    """Resolved flat configuration with schema-checked access."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values: dict[str, Any] = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        field = SCHEMA[key]
        if isinstance(value, str) and field.type is not str:
            value = _coerce(key, value)
        if field.type is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, field.type) or (field.type is int and isinstance(value, bool)):
            raise ConfigError(f"{key}: expected {field.type.__name__}, got {type(value).__name__}")
        if field.choices is not None and value not in field.choices:
            raise ConfigError(f"{key}: {value!r} not in {field.choices}")
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        return self._values[key]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def apply_file(self, path: str | Path) -> None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
            self.set(key, _coerce(key, raw))

    def apply_overrides(self, pairs: list[str]) -> None:
        """Apply repeatable KEY=VALUE overrides (later entries win)."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must be KEY=VALUE, got {pair!r}")
            key, _, raw = pair.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key: {key}")
            self.set(key, _coerce(key, raw))

    def snapshot(self) -> str:
        """Canonical text rendering; byte-stable for identical configs."""
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, float):
                rendered = repr(value)
            else:
                rendered = str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.snapshot().encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg.apply_file(path)
    if overrides:
        cfg.apply_overrides(overrides)
    if seed is not None:
        cfg.set("seed", seed)
    return cfg


def describe_schema() -> str:
    """Human-readable schema listing for --help and the README."""
    lines = []
    for key, field in SCHEMA.items():
        extra = f" (one of {', '.join(map(str, field.choices))})" if field.choices else ""
        lines.append(f"{key:34s} {field.type.__name__:5s} default={field.default!r}: {field.help}{extra}")
    return "\n".join(lines)
