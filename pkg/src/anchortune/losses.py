"""Contrastive objectives: task classification loss, anchor regularizer,
and their combination.

All similarity is cosine over the joint space scaled by a temperature tau,
turned into probabilities with a max-subtracted softmax so large 1/tau
never overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

COMBINE_FORMS = ("convex_eq10", "additive_appendix")
REGULARIZERS = ("cross_entropy", "margin")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    omega: float = 1.0
    combine: str = "additive_appendix"
    regularizer: str = "cross_entropy"
    margin_lambda: float = 0.1
    margin: float = 0.2
    anchor_candidates: str = "prompts_plus_classes"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.combine not in COMBINE_FORMS:
            raise ValueError(f"unknown combine form {self.combine!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.combine == "convex_eq10" and not 0.0 <= self.omega <= 1.0:
            raise ValueError("convex combination needs omega in [0, 1]")
        if self.omega < 0.0:
            raise ValueError("omega must be >= 0")
        if self.anchor_candidates not in ("prompts_plus_classes", "prompts_only"):
            raise ValueError(f"unknown candidate set {self.anchor_candidates!r}")

    @classmethod
    def from_config(cls, cfg) -> "LossConfig":
        return cls(
            tau=cfg["loss.tau"],
            omega=cfg["loss.omega"],
            combine=cfg["loss.combine"],
            regularizer=cfg["loss.regularizer"],
            margin_lambda=cfg["loss.margin_lambda"],
            margin=cfg["loss.margin"],
            anchor_candidates=cfg["loss.anchor_candidates"],
        )


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError(f"zero-norm {what} feature cannot be cosine-normalized")
    return x / norm


def cosine_scores(video: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity, (B, d) x (C, d) -> (B, C) in [-1, 1]."""
    return _unit(video, "video") @ _unit(text, "text").T


def class_probabilities(video: torch.Tensor, text: torch.Tensor,
                        tau: float = 0.07) -> torch.Tensor:
    """Softmax over temperature-scaled cosine scores; rows sum to 1."""
    logits = cosine_scores(video, text) / tau
    logits = logits - logits.max(dim=-1, keepdim=True).values
    return logits.softmax(dim=-1)


def task_loss(video: torch.Tensor, text: torch.Tensor, labels: torch.Tensor,
              tau: float = 0.07) -> torch.Tensor:
    """Mean cross-entropy of each clip against its class row."""
    logits = cosine_scores(video, text) / tau
    return torch.nn.functional.cross_entropy(logits, labels)


def anchor_loss(anchor_video: torch.Tensor, anchor_text: torch.Tensor,
                class_text: torch.Tensor | None, tau: float = 0.07) -> torch.Tensor:
    """Multi-positive cross-entropy pulling anchor clips to anchor prompts.

    Every anchor prompt row counts as a positive; the task class rows (when
    given) are the negatives. With no negatives and a single positive the
    softmax is degenerate and the loss is exactly 0.
    """
    if anchor_video.shape[0] == 0:
        return anchor_video.new_zeros(())
    if class_text is None or class_text.shape[0] == 0:
        candidates = anchor_text
    else:
        candidates = torch.cat([anchor_text, class_text], dim=0)
    probs = class_probabilities(anchor_video, candidates, tau)
    pos = probs[:, :anchor_text.shape[0]].sum(dim=-1)
    return -(pos.clamp_min(1e-12)).log().mean()


def margin_regularizer(anchor_video: torch.Tensor, anchor_text: torch.Tensor,
                       class_text: torch.Tensor, margin: float = 0.2,
                       scale: float = 0.1) -> torch.Tensor:
    """Hinge alternative: anchor-prompt similarity should beat every task
    class similarity by at least ``margin``; violations average, then scale."""
    if anchor_video.shape[0] == 0 or class_text.shape[0] == 0:
        return anchor_video.new_zeros(())
    pos = cosine_scores(anchor_video, anchor_text).max(dim=-1).values   # (B,)
    neg = cosine_scores(anchor_video, class_text)                       # (B, C)
    gap = margin - (pos.unsqueeze(-1) - neg)
    return scale * gap.clamp_min(0.0).mean()


def total_loss(task: torch.Tensor, anchor: torch.Tensor,
               omega: float = 1.0, combine: str = "additive_appendix") -> torch.Tensor:
    """Combine the task and anchor terms.

    convex_eq10:      omega * task + (1 - omega) * anchor, omega in [0, 1]
    additive_appendix: task + omega * anchor
    """
    if combine == "convex_eq10":
        if not 0.0 <= omega <= 1.0:
            raise ValueError("convex combination needs omega in [0, 1]")
        return omega * task + (1.0 - omega) * anchor
    if combine == "additive_appendix":
        if omega < 0.0:
            raise ValueError("omega must be >= 0")
        return task + omega * anchor
    raise ValueError(f"unknown combine form {combine!r}")
