"""Learnable prompt bank and hard/soft prompt coupling.

Soft prompts are trainable token rows inserted into the frozen towers:
prepended for text, appended for vision. Depth J counts prompted layers
starting at the input layer, so J = 0 means no prompt machinery at all and
J = 1 means input-layer prompts only. The text input layer is special: its
prompt block is produced by coupling the layer-0 soft prompts with a frozen
pre-trained hard prompt, and arrives already baked into the assembled
sequence. Deeper prompted layers swap in their own uncoupled soft rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import (
    ROLE_HARD_COUPLED,
    ROLE_SOFT_PROMPT,
    EncoderConfig,
    ShapeError,
    TokenSequence,
)

COUPLING_VARIANTS = (
    "nonlinear", "linear", "additive", "connection_position", "random_position", "none",
)


@dataclass(frozen=True)
class CouplingSpec:
    variant: str = "nonlinear"
    dropout: float = 0.1
    seed: int = 99      # fixes the random_position layout

    def __post_init__(self):
        if self.variant not in COUPLING_VARIANTS:
            raise ValueError(f"unknown coupling variant {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def dropout_mask(shape, p: float, generator: torch.Generator,
                 dtype=torch.float32) -> torch.Tensor:
    """Inverted dropout mask drawn from an explicit generator.

    torch.nn.functional.dropout has no generator argument, so determinism
    requires drawing the mask by hand.
    """
    if p == 0.0:
        return torch.ones(shape, dtype=dtype)
    keep = (torch.rand(shape, generator=generator) >= p).to(dtype)
    return keep / (1.0 - p)


class CouplingProjector(nn.Module):
    """Maps [soft; hard] feature pairs (2d) back to width d.

    Initialized to pass the soft half through unchanged and ignore the hard
    half, so tuning starts from the pure-soft configuration (exactly so for
    the linear variant; the nonlinear variant adds a ReLU on top).
    """

    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(2 * d, d)
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.weight[:, :d] = torch.eye(d)
            self.linear.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z)


class PromptBank(nn.Module):
    """All trainable prompt state for one tuning run.

    Parameters
    ----------
    text_soft : (depth_text, text_len, d_t), row 0 is the coupled layer
    visual_soft : (depth_visual, visual_len, d_v)
    projector : shared across nothing else; only the feature-axis coupling
        variants read it, but it always exists so checkpoints have one shape
    hard : frozen buffer (text_len, d_t) or empty (0, d_t) when absent
    """

    def __init__(self, encoder_config: EncoderConfig, text_len: int = 8,
                 visual_len: int = 4, depth_text: int = 3, depth_visual: int = 3,
                 coupling: CouplingSpec | None = None,
                 hard: torch.Tensor | None = None, hard_provenance: str = "",
                 seed: int = 0, text_init: torch.Tensor | None = None):
        super().__init__()
        if depth_text < 0 or depth_visual < 0:
            raise ValueError("prompt depths must be >= 0")
        if depth_text > encoder_config.text_layers:
            raise ValueError(
                f"depth_text {depth_text} exceeds text tower depth {encoder_config.text_layers}")
        if depth_visual > encoder_config.visual_layers:
            raise ValueError(
                f"depth_visual {depth_visual} exceeds visual tower depth {encoder_config.visual_layers}")
        self.encoder_config = encoder_config
        self.text_len = text_len
        self.visual_len = visual_len
        self.depth_text = depth_text
        self.depth_visual = depth_visual
        self.coupling = coupling or CouplingSpec()
        self.hard_provenance = hard_provenance

        g = torch.Generator().manual_seed(seed)
        d_t, d_v = encoder_config.d_t, encoder_config.d_v
        text_rows = torch.empty(max(depth_text, 0), text_len, d_t).normal_(
            0.0, 0.02, generator=g)
        if text_init is not None:
            # word-embedding initialization: prompt rows start as real template
            # words (cycled to fill text_len) plus the jitter drawn above, so
            # tuning starts from an input the frozen tower already understands
            if text_init.ndim != 2 or text_init.shape[1] != d_t:
                raise ShapeError(f"text_init must be (n, {d_t}), got {tuple(text_init.shape)}")
            rows = torch.stack([text_init[i % text_init.shape[0]]
                                for i in range(text_len)]).to(text_rows.dtype)
            text_rows = text_rows + rows
        self.text_soft = nn.Parameter(text_rows)
        self.visual_soft = nn.Parameter(
            torch.empty(max(depth_visual, 0), visual_len, d_v).normal_(0.0, 0.02, generator=g))
        # the projector's nn.Linear draws its throwaway default init from the
        # global stream; fork so bank construction is pure
        with torch.random.fork_rng(devices=[]):
            self.projector = CouplingProjector(d_t)

        if hard is None:
            hard_t = torch.zeros(0, d_t)
        else:
            hard_t = hard.detach().clone().float()
            if hard_t.shape != (text_len, d_t):
                raise ShapeError(
                    f"hard prompt shape {tuple(hard_t.shape)} != ({text_len}, {d_t})")
        self.register_buffer("hard", hard_t)

        order = np.random.default_rng(self.coupling.seed).permutation(2 * text_len)
        self.register_buffer("rand_order", torch.from_numpy(order.astype(np.int64)))

    @property
    def has_hard(self) -> bool:
        return self.hard.shape[0] > 0

    def text_prompts(self, layer: int) -> torch.Tensor:
        """Uncoupled soft rows for a prompted text layer (layer >= 1)."""
        if not 0 <= layer < self.depth_text:
            raise IndexError(f"layer {layer} outside prompted text depth {self.depth_text}")
        return self.text_soft[layer]

    def visual_prompts(self, layer: int) -> torch.Tensor:
        if not 0 <= layer < self.depth_visual:
            raise IndexError(f"layer {layer} outside prompted visual depth {self.depth_visual}")
        return self.visual_soft[layer]

    def coupled_text_prompts(self, train: bool = False,
                             generator: torch.Generator | None = None) -> TokenSequence:
        """Layer-0 text prompt block after coupling with the hard prompt.

        Token-axis variants return 2 * text_len rows; the rest return
        text_len. Dropout applies only to the nonlinear variant in train
        mode and must be fed an explicit generator.
        """
        if self.depth_text == 0:
            raise ValueError("depth_text is 0: no text prompts exist to couple")
        soft = self.text_soft[0]
        variant = self.coupling.variant
        if variant == "none":
            return TokenSequence(soft, [ROLE_SOFT_PROMPT] * self.text_len)
        if not self.has_hard:
            raise ValueError(
                f"coupling variant {variant!r} needs a hard prompt; none was loaded")
        hard = self.hard.to(soft.dtype)
        if variant == "additive":
            return TokenSequence(soft + hard, [ROLE_SOFT_PROMPT] * self.text_len)
        if variant == "connection_position":
            tokens = torch.cat([soft, hard], dim=0)
            roles = [ROLE_SOFT_PROMPT] * self.text_len + [ROLE_HARD_COUPLED] * self.text_len
            return TokenSequence(tokens, roles)
        if variant == "random_position":
            tokens = torch.cat([soft, hard], dim=0)[self.rand_order]
            base = [ROLE_SOFT_PROMPT] * self.text_len + [ROLE_HARD_COUPLED] * self.text_len
            roles = [base[i] for i in self.rand_order.tolist()]
            return TokenSequence(tokens, roles)
        # feature-axis variants: concat per-row, project 2d -> d
        z = torch.cat([soft, hard], dim=-1)
        out = self.projector(z)
        if variant == "nonlinear":
            out = torch.relu(out)
            if train and self.coupling.dropout > 0.0:
                if generator is None:
                    raise ValueError(
                        "train-mode nonlinear coupling needs an explicit generator for dropout")
                out = out * dropout_mask(out.shape, self.coupling.dropout, generator, out.dtype)
        return TokenSequence(out, [ROLE_SOFT_PROMPT] * self.text_len)

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Parameters the tuner may update; feature-axis variants add the projector."""
        params = []
        if self.depth_text > 0:
            params.append(self.text_soft)
        if self.depth_visual > 0:
            params.append(self.visual_soft)
        if self.coupling.variant in ("nonlinear", "linear"):
            params.extend(self.projector.parameters())
        return params

    @classmethod
    def from_config(cls, cfg, encoder_config: EncoderConfig,
                    hard: torch.Tensor | None = None, hard_provenance: str = "",
                    seed: int | None = None,
                    text_init: torch.Tensor | None = None) -> "PromptBank":
        return cls(
            encoder_config,
            text_len=cfg["prompt.text_len"],
            visual_len=cfg["prompt.visual_len"],
            depth_text=cfg["prompt.depth_text"],
            depth_visual=cfg["prompt.depth_visual"],
            coupling=CouplingSpec(cfg["prompt.coupling"], cfg["prompt.dropout"],
                                  cfg["prompt.coupling_seed"]),
            hard=hard,
            hard_provenance=hard_provenance,
            seed=cfg["seed"] if seed is None else seed,
            text_init=text_init,
        )


# ---- batched insertion helpers used by the towers -----------------------

def prepend_text_prompts(x: torch.Tensor, prompts: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Prepend (Lp, d) prompt rows to every sequence in (N, L, d)."""
    n = x.shape[0]
    block = prompts.to(x.dtype).unsqueeze(0).expand(n, -1, -1)
    return torch.cat([block, x], dim=1), prompts.shape[0]


def append_visual_prompts(x: torch.Tensor, prompts: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Append (Lp, d) prompt rows after the patch tokens in (N, L, d)."""
    n = x.shape[0]
    block = prompts.to(x.dtype).unsqueeze(0).expand(n, -1, -1)
    return torch.cat([x, block], dim=1), prompts.shape[0]


def strip_visual_prompts(x: torch.Tensor, n_prompts: int) -> torch.Tensor:
    if n_prompts == 0:
        return x
    return x[:, :-n_prompts, :]


# ---- sequence assembly ---------------------------------------------------

def assemble_text_input(encoder, class_name: str, bank: PromptBank | None = None,
                        coupled: TokenSequence | None = None,
                        train: bool = False,
                        generator: torch.Generator | None = None) -> TokenSequence:
    """Build the full text-tower input for one class name.

    Layout is [coupled prompt block, class-name words]; the readout token is
    the final word. Without a bank (or at depth 0) the sequence is the bare
    word embedding, which is also the vanilla caption path. A precomputed
    ``coupled`` block lets one training step share a single dropout draw
    across every class.
    """
    word_seq = encoder.embed_words(encoder.vocab.tokenize(class_name))
    if bank is None or bank.depth_text == 0:
        prompt_seq = None
    else:
        prompt_seq = coupled if coupled is not None else \
            bank.coupled_text_prompts(train=train, generator=generator)
    if prompt_seq is None:
        seq = word_seq
    else:
        seq = TokenSequence(
            tokens=torch.cat([prompt_seq.tokens.to(word_seq.tokens.dtype), word_seq.tokens], dim=0),
            roles=list(prompt_seq.roles) + list(word_seq.roles),
            ids=word_seq.ids,
        )
    if len(seq) > encoder.config.context_length:
        raise ShapeError(
            f"assembled sequence for {class_name!r} has {len(seq)} tokens, "
            f"context window is {encoder.config.context_length}")
    return seq


def class_text_features(encoder, names: list[str], bank: PromptBank | None = None,
                        train: bool = False,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Encode many class names into (N, d_joint) joint features.

    The coupled prompt block is computed once and shared by every name, so
    a train-mode dropout draw is consistent across the class set. Names are
    grouped by sequence length so each group batches through the tower.
    """
    coupled = None
    if bank is not None and bank.depth_text > 0:
        coupled = bank.coupled_text_prompts(train=train, generator=generator)
    seqs = [assemble_text_input(encoder, name, bank, coupled=coupled) for name in names]
    out: list[torch.Tensor | None] = [None] * len(names)
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(seqs):
        by_len.setdefault(len(seq), []).append(i)
    for indices in by_len.values():
        stack = torch.stack([seqs[i].tokens for i in indices])
        feats = encoder.encode_text_batch(stack, seqs[indices[0]].roles, bank)
        for row, i in enumerate(indices):
            out[i] = feats[row]
    return torch.stack([f for f in out])  # type: ignore[list-item]
