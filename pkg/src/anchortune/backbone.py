"""Frozen mini dual encoder: visual transformer over frame patches and text
transformer over word embeddings, projected into a shared joint space.

The backbone is "pre-trained" in-repo (see ``training.pretrain_backbone``)
and stays frozen during prompt tuning; only prompt parameters ever change
afterwards. Geometry is desk-scale but the mechanics are dimension-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

# token roles used for sequence bookkeeping
ROLE_CLASS_TOKEN = "class_token"
ROLE_PATCH = "patch"
ROLE_WORD = "word"
ROLE_SOFT_PROMPT = "soft_prompt"
ROLE_HARD_COUPLED = "hard_coupled_prompt"
PROMPT_ROLES = (ROLE_SOFT_PROMPT, ROLE_HARD_COUPLED)

UNKNOWN_WORD = "<unk>"


class ShapeError(ValueError):
    """Dimension mismatch between data and encoder geometry."""


@dataclass
class VideoClip:
    """A T x H x W x 3 frame stack with unit-interval pixels.

    ``source`` distinguishes task clips from anchor clips so that anchor
    provenance survives batching.
    """

    frames: np.ndarray
    label: str
    source: str = "task"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (T,H,W,3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ShapeError("clip needs at least one frame")
        if self.source not in ("task", "anchor"):
            raise ValueError(f"source must be 'task' or 'anchor', got {self.source!r}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"pixel values outside [0,1]: min={lo}, max={hi}")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class TokenSequence:
    """Embedded token matrix plus per-token role labels."""

    tokens: torch.Tensor           # (L, d)
    roles: list[str]
    ids: list[int] | None = None   # vocab ids for word tokens, when known

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be (L, d), got {tuple(self.tokens.shape)}")
        if len(self.roles) != self.tokens.shape[0]:
            raise ShapeError(
                f"roles length {len(self.roles)} != token count {self.tokens.shape[0]}")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


@dataclass(frozen=True)
class EncoderConfig:
    visual_layers: int = 4
    text_layers: int = 4
    d_v: int = 64
    d_t: int = 64
    d_joint: int = 32
    patch_size: int = 8
    heads: int = 4
    context_length: int = 32
    frame_size: int = 32   # square frames; fixes the positional table size

    def __post_init__(self):
        for name in ("visual_layers", "text_layers", "d_v", "d_t", "d_joint",
                     "patch_size", "heads", "context_length", "frame_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_v % self.heads or self.d_t % self.heads:
            raise ValueError("d_v and d_t must be divisible by heads")
        if self.frame_size % self.patch_size:
            raise ValueError("frame_size must be divisible by patch_size")

    @property
    def num_patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @classmethod
    def from_config(cls, cfg) -> "EncoderConfig":
        return cls(
            visual_layers=cfg["encoder.visual_layers"],
            text_layers=cfg["encoder.text_layers"],
            d_v=cfg["encoder.d_v"],
            d_t=cfg["encoder.d_t"],
            d_joint=cfg["encoder.d_joint"],
            patch_size=cfg["encoder.patch_size"],
            heads=cfg["encoder.heads"],
            context_length=cfg["encoder.context_length"],
            frame_size=cfg["data.frame_size"],
        )


class Vocab:
    """Whitespace word-level vocabulary.

    Index 0 is the reserved unknown token. ``record_access`` supports the
    zero-shot audit: when enabled, every word looked up through
    ``tokenize`` is remembered.
    """

    def __init__(self, words: Sequence[str]):
        uniq = sorted(set(words) - {UNKNOWN_WORD})
        self.words: list[str] = [UNKNOWN_WORD] + uniq
        self._index = {w: i for i, w in enumerate(self.words)}
        self.record_access = False
        self.accessed: set[str] = set()

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        words: list[str] = []
        for text in texts:
            words.extend(text.split())
        return cls(words)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if self.record_access:
                self.accessed.add(word)
            ids.append(self._index.get(word, 0))
        return ids


def patchify(frames: np.ndarray | torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split frames (T,H,W,3) into (T, M, 3P^2) flat patches, M = H*W/P^2.

    Flattening is bit-exact row-major: patches are ordered over
    (patch_row, patch_col) and each patch flattens its (P, P, 3) block in
    C order, i.e. pixel row, then pixel column, then channel.
    """
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (T,H,W,3), got {tuple(frames.shape)}")
    t, h, w, c = frames.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"frame size {h}x{w} not divisible by patch size {p}")
    m = (h // p) * (w // p)
    x = frames.reshape(t, h // p, p, w // p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)            # (T, rows, cols, P, P, 3)
    return x.reshape(t, m, p * p * c)


def _init_linear(linear: nn.Linear, generator: torch.Generator, std: float = 0.02) -> None:
    with torch.no_grad():
        linear.weight.copy_(torch.empty_like(linear.weight).normal_(0.0, std, generator=generator))
        if linear.bias is not None:
            linear.bias.zero_()


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        q = q.transpose(1, 2)                   # (B, heads, N, head_dim)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class TransformerLayer(nn.Module):
    """Pre-LN block: attention and a 4x GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))
        return x


class DualEncoder(nn.Module):
    """Visual + text towers sharing a joint space.

    Evaluation-mode encoding is pure and safe for concurrent read-only use;
    only ``training.pretrain_backbone`` ever updates these parameters.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocab, seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab = vocab
        g = torch.Generator().manual_seed(seed)
        # submodule constructors draw default inits from the global stream
        # before the seeded overwrite below; fork so construction is pure
        with torch.random.fork_rng(devices=[]):
            self._build(config, vocab, g)

    def _build(self, config: EncoderConfig, vocab: Vocab, g: torch.Generator) -> None:
        p, d_v, d_t = config.patch_size, config.d_v, config.d_t
        self.patch_proj = nn.Linear(3 * p * p, d_v)
        self.class_token = nn.Parameter(torch.empty(d_v).normal_(0.0, 0.02, generator=g))
        self.visual_pos = nn.Parameter(
            torch.empty(1 + config.num_patches, d_v).normal_(0.0, 0.02, generator=g))
        self.visual_layers = nn.ModuleList(
            TransformerLayer(d_v, config.heads) for _ in range(config.visual_layers))
        self.visual_ln = nn.LayerNorm(d_v)
        self.visual_proj = nn.Linear(d_v, config.d_joint, bias=False)

        self.token_embed = nn.Embedding(len(vocab), d_t)
        self.text_pos = nn.Parameter(
            torch.empty(config.context_length, d_t).normal_(0.0, 0.02, generator=g))
        self.text_layers = nn.ModuleList(
            TransformerLayer(d_t, config.heads) for _ in range(config.text_layers))
        self.text_ln = nn.LayerNorm(d_t)
        self.text_proj = nn.Linear(d_t, config.d_joint, bias=False)

        with torch.no_grad():
            self.token_embed.weight.copy_(
                torch.empty_like(self.token_embed.weight).normal_(0.0, 0.02, generator=g))
        _init_linear(self.patch_proj, g)
        for tower in (self.visual_layers, self.text_layers):
            for layer in tower:
                _init_linear(layer.attn.qkv, g)
                _init_linear(layer.attn.out, g)
                _init_linear(layer.fc1, g)
                _init_linear(layer.fc2, g)
        _init_linear(self.visual_proj, g)
        _init_linear(self.text_proj, g)

    @property
    def dtype(self) -> torch.dtype:
        return self.class_token.dtype

    def freeze(self) -> None:
        for param in self.parameters():
            param.requires_grad_(False)

    # ---- visual tower -------------------------------------------------

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B,T,H,W,3) -> (B*T, 1+M, d_v) with class token and positions."""
        b, t = frames.shape[:2]
        flat = frames.reshape(b * t, *frames.shape[2:])
        # patchify handles any (N,H,W,3) stack; N = B*T here
        patches = patchify(flat, self.config.patch_size).to(self.dtype)
        tokens = self.patch_proj(patches)                       # (B*T, M, d_v)
        cls = self.class_token.expand(tokens.shape[0], 1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.visual_pos
        return x

    def encode_videos(self, frames: torch.Tensor, bank=None) -> torch.Tensor:
        """Encode a batch of clips (B,T,H,W,3) into (B, d_joint) features.

        Per frame: run the visual tower with deep visual prompts appended
        after the patch tokens and stripped after every prompted layer, read
        the class token, project to the joint space; the video feature is the
        mean over frames.
        """
        from . import prompting

        if frames.ndim == 4:
            frames = frames.unsqueeze(0)
        b, t = frames.shape[:2]
        x = self.embed_frames(frames.to(self.dtype))
        depth = bank.depth_visual if bank is not None else 0
        for i, layer in enumerate(self.visual_layers):
            inserted = 0
            if bank is not None and i < depth:
                x, inserted = prompting.append_visual_prompts(x, bank.visual_prompts(i))
            x = layer(x)
            if inserted:
                x = prompting.strip_visual_prompts(x, inserted)
        x = self.visual_ln(x[:, 0, :])
        feats = self.visual_proj(x).reshape(b, t, -1)
        return feats.mean(dim=1)

    def encode_video(self, clip: VideoClip, bank=None) -> torch.Tensor:
        """Single-clip convenience wrapper returning a (d_joint,) feature."""
        frames = torch.from_numpy(np.ascontiguousarray(clip.frames)).to(self.dtype)
        return self.encode_videos(frames.unsqueeze(0), bank)[0]

    # ---- text tower ----------------------------------------------------

    def embed_words(self, ids: Sequence[int]) -> TokenSequence:
        """Plain word embedding lookup (no prompts), roles all 'word'."""
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        tokens = self.token_embed(idx).to(self.dtype)
        return TokenSequence(tokens=tokens, roles=[ROLE_WORD] * len(ids), ids=list(ids))

    def encode_text(self, seq: TokenSequence, bank=None) -> torch.Tensor:
        """Encode one assembled token sequence into a (d_joint,) feature.

        Positions are added once at entry over the whole assembled sequence.
        When the bank's text depth J >= 1, the leading prompt block is
        stripped after each prompted layer and replaced by that layer's soft
        prompts; with J = 0 the assembled sequence flows through unchanged.
        The readout is the final token state (the terminal class-name slot).
        """
        return self.encode_text_batch(seq.tokens.unsqueeze(0), seq.roles, bank)[0]

    def encode_text_batch(self, tokens: torch.Tensor, roles: list[str], bank=None) -> torch.Tensor:
        """Encode (N, L, d_t) sequences sharing one role layout."""
        from . import prompting

        n, length = tokens.shape[:2]
        if length > self.config.context_length:
            raise ShapeError(
                f"sequence length {length} exceeds context window {self.config.context_length}")
        n_prompt = 0
        while n_prompt < len(roles) and roles[n_prompt] in PROMPT_ROLES:
            n_prompt += 1
        if any(r in PROMPT_ROLES for r in roles[n_prompt:]):
            raise ShapeError("prompt tokens must form the leading block of a text sequence")
        x = tokens.to(self.dtype) + self.text_pos[:length]
        depth = bank.depth_text if bank is not None else 0

        if depth == 0:
            # no prompt machinery: the assembled sequence flows through intact
            for layer in self.text_layers:
                x = layer(x)
            base = x
        else:
            # layer 0 consumes the coupled prompt block already present in
            # the assembled input; deeper prompted layers swap in their own
            x = self.text_layers[0](x)
            base = x[:, n_prompt:, :]
            for i in range(1, len(self.text_layers)):
                layer = self.text_layers[i]
                if i < depth:
                    x_in, inserted = prompting.prepend_text_prompts(base, bank.text_prompts(i))
                    y = layer(x_in)
                    base = y[:, inserted:, :]
                else:
                    base = layer(base)
        out = self.text_ln(base[:, -1, :])
        return self.text_proj(out)


def state_fingerprint(module: nn.Module) -> bytes:
    """Byte-exact digest input of all parameters and buffers, sorted by name."""
    parts = []
    state = module.state_dict()
    for name in sorted(state):
        parts.append(name.encode())
        parts.append(state[name].detach().cpu().contiguous().numpy().tobytes())
    return b"".join(parts)
