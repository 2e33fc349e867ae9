"""Two-stage training pipeline.

Stage one tunes plain soft prompts on a label-disjoint source split and
freezes the learned layer-0 text prompts as the hard prompt. Stage two
runs the main tuning loop: coupled prompts, anchor regularization, AdamW
with an optional cosine schedule, best/last checkpoints, and an
append-only JSON-lines run log.

Determinism contract: every random draw comes from a stateless stream
keyed by (seed, purpose, epoch/step), so a fixed seed reproduces the run
log and checkpoints byte for byte, and resuming from the last epoch
checkpoint continues the uninterrupted byte stream.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import prompting
from .anchors import (ANCHOR_TEMPLATE, AnchorSet, build_anchor_prompt,
                      filter_anchor_labels, sample_anchor_videos)
from .backbone import DualEncoder, EncoderConfig, Vocab
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)
from .data import (
    ClipDataset,
    ClipRecord,
    SyntheticSpec,
    caption_for,
    dataset_vocab_texts,
    ensure_dataset,
    split_records,
)
from .evaluation import (
    EvalReport,
    SplitSpec,
    evaluate,
    few_shot_select,
    report_base_to_novel,
    split_base_novel,
)
from .losses import LossConfig, anchor_loss, margin_regularizer, task_loss, total_loss
from .prompting import PromptBank, class_text_features

# stream purposes for stateless RNG derivation
PURPOSE_BATCH = 1
PURPOSE_ANCHOR = 2
PURPOSE_DROPOUT = 3
PURPOSE_SHOTS = 4
PURPOSE_CAPTION = 5

STAGES = ("pretrain_hard", "main")


def stream_rng(*key: int) -> np.random.Generator:
    """Numpy generator for one (seed, purpose, ...) stream."""
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def stream_torch_generator(*key: int) -> torch.Generator:
    """Torch generator seeded from the same stream family."""
    seed = int(stream_rng(*key).integers(0, 2**63 - 1))
    return torch.Generator().manual_seed(seed)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to 0 over the planned step budget."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for either stage."""

    stage: str = "main"
    epochs: int = 10
    batch_size: int = 16
    anchor_batch_size: int = 2
    learning_rate: float = 2e-2
    weight_decay: float = 1e-3
    schedule: str = "cosine"
    seed: int = 0
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.anchor_batch_size < 0:
            raise ValueError("anchor_batch_size must be >= 0 (0 disables anchors)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_config(cls, cfg, stage: str = "main") -> "TrainConfig":
        anchor_bs = cfg["train.anchor_batch_size"]
        if anchor_bs < 0:
            anchor_bs = max(1, cfg["train.batch_size"] // 8)
        lr = cfg["train.learning_rate"]
        epochs = cfg["train.epochs"]
        if stage == "pretrain_hard":
            lr = lr / 4.0          # moderate tuning for the source stage
            epochs = cfg["hard.epochs"]
            anchor_bs = 0
        return cls(
            stage=stage,
            epochs=epochs,
            batch_size=cfg["train.batch_size"],
            anchor_batch_size=anchor_bs,
            learning_rate=lr,
            weight_decay=cfg["train.weight_decay"],
            schedule=cfg["train.schedule"],
            seed=cfg["seed"],
            grad_clip=cfg["train.grad_clip"],
        )


class ModelScorer:
    """Duck-typed scorer over a frozen encoder and a prompt bank.

    Evaluation and embedding export only need these two methods, so oracle
    scorers can replace this class in tests.
    """

    def __init__(self, encoder: DualEncoder, bank: PromptBank | None = None):
        self.encoder = encoder
        self.bank = bank

    def class_features(self, names: list[str]) -> torch.Tensor:
        with torch.no_grad():
            return class_text_features(self.encoder, names, self.bank, train=False)

    def video_features(self, batch: np.ndarray) -> torch.Tensor:
        frames = torch.from_numpy(np.ascontiguousarray(batch))
        with torch.no_grad():
            return self.encoder.encode_videos(frames, self.bank)


# ---- backbone stage ------------------------------------------------------


def caption_variant(record: ClipRecord, draw: float, mixed: bool) -> str:
    """Caption style for one backbone pre-training pair.

    The kind-first curriculum trains on motion-only texts before mixing in
    full captions that also name the background. Without the early phase the
    towers latch onto the globally-coherent background and never pick up the
    single-patch motion signal; without the late phase the background never
    enters the joint space at all.
    """
    action = ANCHOR_TEMPLATE.format(record.label)
    if not mixed:
        return record.label if draw < 0.5 else action
    if draw < 0.5:
        return caption_for(record)
    return action if draw < 0.75 else record.label


def _encode_text_strings(encoder: DualEncoder, texts: list[str]) -> torch.Tensor:
    """Vanilla text features for raw strings, batched by sequence length."""
    seqs = [encoder.embed_words(encoder.vocab.tokenize(t)) for t in texts]
    out: list[torch.Tensor | None] = [None] * len(texts)
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(seqs):
        by_len.setdefault(len(seq), []).append(i)
    for idxs in by_len.values():
        stack = torch.stack([seqs[i].tokens for i in idxs])
        feats = encoder.encode_text_batch(stack, ["word"] * stack.shape[1])
        for row, i in enumerate(idxs):
            out[i] = feats[row]
    return torch.stack([f for f in out])  # type: ignore[list-item]


def pretrain_backbone(cfg, records: list[ClipRecord], root: str | Path,
                      out_path: str | Path) -> tuple[DualEncoder, Vocab]:
    """Contrastively align the towers on caption-supervised clips.

    Symmetric InfoNCE over in-batch pairs, with a kind-first caption
    curriculum (see caption_variant): the first half of the epochs uses
    motion-only texts, the second half mixes in captions naming the
    background. Both factors end up represented in the joint space. AdamW
    skips weight decay on gains, biases, and embedding-like tables; the
    learning rate warms up linearly for the first tenth of the step budget
    and then follows a cosine to zero. The trained encoder is frozen and
    checkpointed; later stages never touch its weights.
    """
    vocab = Vocab.from_texts(dataset_vocab_texts(records))
    enc_config = EncoderConfig.from_config(cfg)
    seed = cfg["backbone.seed"]
    encoder = DualEncoder(enc_config, vocab, seed=seed)
    split = split_records(records, "backbone")
    if not split:
        raise ValueError("dataset has no backbone split")
    dataset = ClipDataset(root, split, frames=cfg["train.frames"])
    distractors = split_records(records, "distractor")
    distractor_ds = ClipDataset(root, distractors, frames=cfg["train.frames"]) \
        if distractors else None
    tau = cfg["backbone.tau"]
    batch_size = cfg["backbone.batch_size"]
    epochs = cfg["backbone.epochs"]
    base_lr = cfg["backbone.learning_rate"]
    decay, no_decay = [], []
    for name, param in encoder.named_parameters():
        small = param.ndim < 2 or "embed" in name or "pos" in name
        (no_decay if small else decay).append(param)
    optimizer = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg["backbone.weight_decay"]},
         {"params": no_decay, "weight_decay": 0.0}], lr=base_lr)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    warmup = max(1, total_steps // 10)
    encoder.train()
    final_loss = float("nan")
    step = 0
    for epoch in range(epochs):
        order = stream_rng(seed, PURPOSE_BATCH, epoch).permutation(len(dataset))
        style = stream_rng(seed, PURPOSE_CAPTION, epoch)
        mixed = epoch >= epochs // 2
        for start in range(0, len(dataset), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            if step < warmup:
                lr = base_lr * (step + 1) / warmup
            else:
                lr = cosine_lr(base_lr, step - warmup, total_steps - warmup)
            for group in optimizer.param_groups:
                group["lr"] = lr
            clips = [dataset.load(int(i)) for i in idx]
            texts = [caption_variant(dataset.records[int(i)], style.random(), mixed)
                     for i in idx]
            if mixed and distractor_ds is not None and style.random() < 0.5:
                # one slot per batch pairs a nameless leftover-kind clip with
                # the generic template, giving the anchor text a real location
                # in video space. At most one: repeats of an identical caption
                # would be contradictory in-batch negatives.
                slot = int(style.integers(len(clips)))
                clips[slot] = distractor_ds.load(int(style.integers(len(distractor_ds))))
                texts[slot] = build_anchor_prompt()
            frames = torch.from_numpy(np.stack(clips))
            vid = encoder.encode_videos(frames)
            txt = _encode_text_strings(encoder, texts)
            vid = vid / vid.norm(dim=-1, keepdim=True)
            txt = txt / txt.norm(dim=-1, keepdim=True)
            logits = vid @ txt.T / tau
            labels = torch.arange(len(idx))
            loss = 0.5 * (torch.nn.functional.cross_entropy(logits, labels)
                          + torch.nn.functional.cross_entropy(logits.T, labels))
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(encoder.parameters(), 1.0)
            optimizer.step()
            final_loss = float(loss.detach())
            step += 1
    encoder.eval()
    encoder.freeze()
    meta = {
        "stage": "backbone",
        "seed": cfg["backbone.seed"],
        "epochs": cfg["backbone.epochs"],
        "final_loss": final_loss,
        "vocab": vocab.words,
        "encoder": {
            "visual_layers": enc_config.visual_layers,
            "text_layers": enc_config.text_layers,
            "d_v": enc_config.d_v, "d_t": enc_config.d_t,
            "d_joint": enc_config.d_joint,
            "patch_size": enc_config.patch_size,
            "heads": enc_config.heads,
            "context_length": enc_config.context_length,
            "frame_size": enc_config.frame_size,
        },
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
    }
    save_checkpoint(out_path, meta, module_arrays(encoder))
    return encoder, vocab


def load_backbone(path: str | Path) -> tuple[DualEncoder, Vocab, dict]:
    meta, arrays = load_checkpoint(path)
    if meta.get("stage") != "backbone":
        raise CheckpointError(f"{path} is a {meta.get('stage')!r} checkpoint, not a backbone")
    geom = meta["encoder"]
    vocab = Vocab(meta["vocab"])
    if vocab.words != meta["vocab"]:
        raise CheckpointError(f"{path}: vocab words not in canonical order")
    enc_config = EncoderConfig(**geom)
    encoder = DualEncoder(enc_config, vocab, seed=int(meta["seed"]))
    load_module_arrays(encoder, arrays)
    encoder.eval()
    encoder.freeze()
    return encoder, vocab, meta


def backbone_path(cfg) -> Path:
    given = cfg["backbone.checkpoint"]
    return Path(given) if given else Path(cfg["data.root"]) / "backbone.ckpt"


def ensure_backbone(cfg, records: list[ClipRecord],
                    root: str | Path) -> tuple[DualEncoder, Vocab, dict]:
    """Load the backbone checkpoint, pre-training it first when missing."""
    path = backbone_path(cfg)
    if not path.exists():
        pretrain_backbone(cfg, records, root, path)
    encoder, vocab, meta = load_backbone(path)
    want = EncoderConfig.from_config(cfg)
    have = EncoderConfig(**meta["encoder"])
    if want != have:
        raise CheckpointError(
            f"backbone at {path} was built for geometry {have}, config wants {want}")
    return encoder, vocab, meta


# ---- hard-prompt stage ---------------------------------------------------


def random_hard_prompt(enc_config: EncoderConfig, text_len: int,
                       seed: int) -> torch.Tensor:
    """Baseline hard prompt: same init distribution, no pre-training."""
    g = torch.Generator().manual_seed(seed)
    return torch.empty(text_len, enc_config.d_t).normal_(0.0, 0.02, generator=g)


def template_prompt_init(encoder: DualEncoder) -> torch.Tensor:
    """Generic-template word embeddings, the starting point for soft prompts.

    Starting from real words keeps the frozen towers inside the input
    distribution they were pre-trained on; random rows there behave like
    out-of-vocabulary noise and make early tuning epochs erratic.
    """
    ids = encoder.vocab.tokenize(build_anchor_prompt())
    return encoder.embed_words(ids).tokens.detach().clone()


def pretrain_hard_prompts(cfg, encoder: DualEncoder, records: list[ClipRecord],
                          root: str | Path, out_path: str | Path,
                          task_labels: list[str] | None = None) -> tuple[torch.Tensor, dict]:
    """Tune plain soft prompts on the source split and freeze the result.

    Standard prompt tuning: coupling disabled, no anchors. The exported
    matrix is the layer-0 text prompt after cfg["hard.epochs"] epochs (0
    epochs exports the raw initialization). Source labels must be disjoint
    from the downstream task labels.
    """
    source = split_records(records, "pretrain_train")
    if not source:
        raise ValueError("dataset has no pretrain_train split")
    source_labels = sorted({rec.label for rec in source})
    if task_labels is None:
        task_labels = sorted({rec.label for rec in split_records(records, "train")})
    kept, _ = filter_anchor_labels(source_labels, list(task_labels))
    if kept != source_labels:
        clashed = sorted(set(source_labels) - set(kept))
        raise ValueError(
            f"hard-prompt source labels overlap the task labels: {clashed}")

    seed = cfg["hard.seed"]
    bank = PromptBank(
        encoder.config,
        text_len=cfg["prompt.text_len"],
        visual_len=cfg["prompt.visual_len"],
        depth_text=max(1, cfg["prompt.depth_text"]),
        depth_visual=cfg["prompt.depth_visual"],
        coupling=prompting.CouplingSpec("none", 0.0, cfg["prompt.coupling_seed"]),
        hard=None,
        seed=seed,
        text_init=template_prompt_init(encoder),
    )
    train_cfg = TrainConfig.from_config(cfg, stage="pretrain_hard")
    dataset = ClipDataset(root, source, frames=cfg["train.frames"])
    loss_cfg = LossConfig.from_config(cfg)
    _fit_prompts(encoder, bank, dataset, source_labels, train_cfg, loss_cfg,
                 anchor_set=None, anchor_dataset=None, anchor_text=None,
                 log=None, run_seed=seed)
    hard = bank.text_soft[0].detach().clone()
    provenance = (f"pretrained on {len(source_labels)} source classes, "
                  f"{train_cfg.epochs} epochs, seed {seed}")
    meta = {
        "stage": "hard_prompt",
        "seed": seed,
        "epochs": train_cfg.epochs,
        "provenance": provenance,
        "source_labels": source_labels,
        "text_len": cfg["prompt.text_len"],
    }
    save_checkpoint(out_path, meta, {"hard": hard})
    return hard, meta


def hard_prompt_path(cfg) -> Path:
    given = cfg["hard.checkpoint"]
    return Path(given) if given else Path(cfg["data.root"]) / "hard_prompt.ckpt"


def ensure_hard_prompt(cfg, encoder: DualEncoder, records: list[ClipRecord],
                       root: str | Path) -> tuple[torch.Tensor | None, str]:
    """Resolve the hard prompt for the configured coupling variant.

    Returns (tensor, provenance); (None, "") when coupling is 'none'.
    hard.source=random skips pre-training and draws a fresh matrix.
    """
    if cfg["prompt.coupling"] == "none":
        return None, ""
    if cfg["hard.source"] == "random":
        hard = random_hard_prompt(EncoderConfig.from_config(cfg),
                                  cfg["prompt.text_len"], cfg["hard.seed"])
        return hard, f"random init, seed {cfg['hard.seed']}"
    path = hard_prompt_path(cfg)
    if not path.exists():
        pretrain_hard_prompts(cfg, encoder, records, root, path)
    meta, arrays = load_checkpoint(path)
    if meta.get("stage") != "hard_prompt":
        raise CheckpointError(f"{path} is not a hard-prompt checkpoint")
    hard = torch.from_numpy(arrays["hard"])
    if hard.shape != (cfg["prompt.text_len"], cfg["encoder.d_t"]):
        raise CheckpointError(
            f"hard prompt at {path} has shape {tuple(hard.shape)}, config wants "
            f"({cfg['prompt.text_len']}, {cfg['encoder.d_t']})")
    return hard, str(meta.get("provenance", "unknown"))


# ---- main stage ----------------------------------------------------------


def training_step(encoder: DualEncoder, bank: PromptBank, optimizer,
                  loss_cfg: LossConfig, lr: float,
                  task_frames: torch.Tensor, task_labels: torch.Tensor,
                  class_names: list[str],
                  anchor_frames: torch.Tensor | None,
                  anchor_text: torch.Tensor | None,
                  dropout_generator: torch.Generator | None,
                  grad_clip: float = 1.0) -> dict[str, float]:
    """One optimization step over soft prompts and projector.

    Anchor clips ride along in the same encoder pass: frames are
    concatenated after the task clips and the features sliced apart
    afterwards, so batching cannot change anchor semantics.
    """
    n_task = task_frames.shape[0]
    if anchor_frames is not None and anchor_frames.shape[0] > 0:
        frames = torch.cat([task_frames, anchor_frames], dim=0)
    else:
        frames = task_frames
        anchor_frames = None
    feats = encoder.encode_videos(frames, bank)
    if feats.shape[0] != frames.shape[0]:
        raise RuntimeError(
            f"feature count {feats.shape[0]} disagrees with batch {frames.shape[0]}")
    task_feats = feats[:n_task]
    anchor_feats = feats[n_task:] if anchor_frames is not None else None

    text = class_text_features(encoder, class_names, bank, train=True,
                               generator=dropout_generator)
    l_task = task_loss(task_feats, text, task_labels, loss_cfg.tau)
    if anchor_feats is not None and anchor_text is not None:
        if loss_cfg.regularizer == "margin":
            l_anchor = margin_regularizer(anchor_feats, anchor_text, text,
                                          loss_cfg.margin, scale=1.0)
            l_total = l_task + loss_cfg.margin_lambda * l_anchor
        else:
            negatives = text if loss_cfg.anchor_candidates == "prompts_plus_classes" else None
            l_anchor = anchor_loss(anchor_feats, anchor_text, negatives, loss_cfg.tau)
            l_total = total_loss(l_task, l_anchor, loss_cfg.omega, loss_cfg.combine)
    else:
        l_anchor = None
        if loss_cfg.combine == "convex_eq10" and loss_cfg.omega != 1.0:
            raise ValueError(
                "convex combination with disabled anchors requires omega = 1.0")
        l_total = total_loss(l_task, torch.zeros(()), loss_cfg.omega, loss_cfg.combine)

    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    l_total.backward()
    if grad_clip > 0:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    return {
        "loss_total": float(l_total.detach()),
        "loss_task": float(l_task.detach()),
        "loss_anchor": None if l_anchor is None else float(l_anchor.detach()),
    }


class RunLog:
    """Append-only JSON-lines run record; floats serialize via repr through
    json so identical values give identical bytes."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not resume:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _fit_prompts(encoder: DualEncoder, bank: PromptBank, dataset: ClipDataset,
                 class_names: list[str], train_cfg: TrainConfig,
                 loss_cfg: LossConfig, anchor_set: AnchorSet | None,
                 anchor_dataset: ClipDataset | None,
                 anchor_text: torch.Tensor | None,
                 log: RunLog | None, run_seed: int,
                 on_epoch_end=None, start_epoch: int = 0,
                 optimizer_state: dict | None = None,
                 stop_after_epoch: int | None = None) -> dict:
    """Shared optimization loop for both stages.

    Batch order, anchor draws, and dropout masks come from stateless
    streams keyed by (run_seed, purpose, epoch[, step]), so epoch-boundary
    resume replays the identical remainder of the run.
    """
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    for rec in dataset.records:
        if rec.label not in name_to_idx:
            raise ValueError(f"training clip label {rec.label!r} not in class set")
    params = bank.trainable_parameters()
    optimizer = torch.optim.AdamW(params, lr=train_cfg.learning_rate,
                                  weight_decay=train_cfg.weight_decay,
                                  betas=train_cfg.betas, eps=train_cfg.eps)
    if optimizer_state is not None:
        _restore_optimizer(optimizer, optimizer_state)
    steps_per_epoch = math.ceil(len(dataset) / train_cfg.batch_size)
    total_steps = max(1, train_cfg.epochs * steps_per_epoch)
    use_anchors = (anchor_set is not None and anchor_dataset is not None
                   and anchor_set.k > 0 and train_cfg.anchor_batch_size > 0)

    global_step = start_epoch * steps_per_epoch
    last_epoch_stats: dict = {"epochs_run": 0}
    for epoch in range(start_epoch, train_cfg.epochs):
        order = stream_rng(run_seed, PURPOSE_BATCH, epoch).permutation(len(dataset))
        epoch_losses = []
        for step_in_epoch, start in enumerate(range(0, len(dataset), train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            frames = torch.from_numpy(np.stack([dataset.load(int(i)) for i in idx]))
            labels = torch.tensor([name_to_idx[dataset.records[int(i)].label] for i in idx])
            a_frames = None
            if use_anchors:
                draw = stream_rng(run_seed, PURPOSE_ANCHOR, epoch, step_in_epoch)
                picks = draw.integers(0, anchor_set.k, size=train_cfg.anchor_batch_size)
                a_frames = torch.from_numpy(
                    np.stack([anchor_dataset.load(int(p)) for p in picks]))
            gen = stream_torch_generator(run_seed, PURPOSE_DROPOUT, epoch, step_in_epoch)
            lr = train_cfg.learning_rate if train_cfg.schedule == "constant" else \
                cosine_lr(train_cfg.learning_rate, global_step, total_steps)
            parts = training_step(
                encoder, bank, optimizer, loss_cfg, lr, frames, labels,
                class_names, a_frames, anchor_text, gen, train_cfg.grad_clip)
            if not math.isfinite(parts["loss_total"]):
                if log is not None:
                    log.write({"kind": "abort", "epoch": epoch, "step": global_step,
                               "reason": "non-finite loss", **parts})
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {global_step}: {parts}")
            epoch_losses.append(parts["loss_total"])
            if log is not None:
                log.write({"kind": "step", "epoch": epoch, "step": global_step,
                           "lr": lr, "omega": loss_cfg.omega, "tau": loss_cfg.tau,
                           **parts})
            global_step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        last_epoch_stats = {"epochs_run": epoch + 1 - start_epoch,
                            "last_epoch": epoch, "mean_loss": mean_loss,
                            "global_step": global_step}
        if on_epoch_end is not None:
            on_epoch_end(epoch, mean_loss, optimizer, global_step)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return last_epoch_stats


# ---- run orchestration ---------------------------------------------------


def _optimizer_arrays(optimizer) -> tuple[dict[str, np.ndarray], list]:
    """Flatten AdamW moments to checkpoint arrays; step counts go to meta."""
    arrays: dict[str, np.ndarray] = {}
    steps: list = []
    sd = optimizer.state_dict()
    for i in sorted(sd["state"]):
        st = sd["state"][i]
        arrays[f"opt_{i}_exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"opt_{i}_exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        steps.append([int(i), float(st["step"])])
    return arrays, steps


def _optimizer_state_from(arrays: dict[str, np.ndarray], steps: list) -> dict:
    state = {}
    for i, step in steps:
        i = int(i)
        state[i] = {
            "step": float(step),
            "exp_avg": arrays[f"opt_{i}_exp_avg"],
            "exp_avg_sq": arrays[f"opt_{i}_exp_avg_sq"],
        }
    return state


def _restore_optimizer(optimizer, state: dict) -> None:
    sd = optimizer.state_dict()
    sd["state"] = {
        i: {"step": torch.tensor(entry["step"]),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(entry["exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(entry["exp_avg_sq"]))}
        for i, entry in state.items()
    }
    optimizer.load_state_dict(sd)


def save_run_checkpoint(path: str | Path, cfg, bank: PromptBank,
                        optimizer, epoch: int, global_step: int,
                        best_metric: float, metric_name: str,
                        split: SplitSpec | None) -> None:
    arrays = module_arrays(bank)
    opt_arrays, opt_steps = _optimizer_arrays(optimizer)
    arrays.update(opt_arrays)
    meta = {
        "stage": "main",
        "seed": cfg["seed"],
        "config_hash": cfg.hash(),
        "epoch": epoch,
        "global_step": global_step,
        "best_metric": best_metric,
        "metric_name": metric_name,
        "opt_steps": opt_steps,
        "coupling": cfg["prompt.coupling"],
        "hard_provenance": bank.hard_provenance,
        "protocol": cfg["eval.protocol"],
    }
    if split is not None:
        meta["split"] = {"base": list(split.base), "novel": list(split.novel),
                         "seed": split.seed, "protocol": split.protocol,
                         "shots": split.shots}
    save_checkpoint(path, meta, arrays)


def load_run_checkpoint(path: str | Path, bank: PromptBank) -> tuple[dict, dict]:
    """Restore a main-stage checkpoint into the bank; returns (meta,
    optimizer moment state)."""
    meta, arrays = load_checkpoint(path)
    if meta.get("stage") != "main":
        raise CheckpointError(f"{path} is not a main-stage checkpoint")
    bank_keys = {k for k in arrays if not k.startswith("opt_")}
    load_module_arrays(bank, {k: arrays[k] for k in bank_keys})
    opt_state = _optimizer_state_from(arrays, meta.get("opt_steps", []))
    return meta, opt_state


def make_split(cfg, records: list[ClipRecord]) -> SplitSpec:
    """Base/novel split over the task classes plus protocol bookkeeping."""
    import dataclasses

    train_recs = split_records(records, "train")
    split = split_base_novel([r.label for r in train_recs], seed=cfg["eval.split_seed"])
    protocol = cfg["eval.protocol"]
    shots = cfg["train.shots"] if protocol in ("base_to_novel", "few_shot") else None
    return dataclasses.replace(split, protocol=protocol, shots=shots)


def select_training_records(cfg, records: list[ClipRecord],
                            split: SplitSpec) -> tuple[list[ClipRecord], list[str]]:
    """Pick the training clips and class-name space for the protocol.

    base_to_novel tunes on the base half only; zero_shot tunes on the
    label-disjoint source split so task names stay unseen.
    """
    train_recs = split_records(records, "train")
    protocol = split.protocol
    if protocol == "base_to_novel":
        pool = [r for r in train_recs if r.label in set(split.base)]
        selected = few_shot_select(pool, split.shots, seed=cfg["seed"])
        return selected, list(split.base)
    if protocol == "few_shot":
        selected = few_shot_select(train_recs, split.shots, seed=cfg["seed"])
        return selected, sorted({r.label for r in train_recs})
    if protocol == "zero_shot":
        selected = split_records(records, "pretrain_train")
        return selected, sorted({r.label for r in selected})
    return train_recs, sorted({r.label for r in train_recs})


def evaluate_protocol(cfg, encoder: DualEncoder, bank: PromptBank | None,
                      records: list[ClipRecord], root: str | Path,
                      split: SplitSpec) -> EvalReport:
    """Score the validation split under the configured protocol."""
    scorer = ModelScorer(encoder, bank)
    frames = cfg["train.frames"]
    bs = cfg["eval.batch_size"]
    val = split_records(records, "val")
    if not val:
        raise ValueError("dataset has no val split")
    if split.protocol == "base_to_novel":
        base_recs = [r for r in val if r.label in set(split.base)]
        novel_recs = [r for r in val if r.label in set(split.novel)]
        rb = evaluate(scorer, ClipDataset(root, base_recs, frames), list(split.base), bs)
        rn = evaluate(scorer, ClipDataset(root, novel_recs, frames), list(split.novel), bs)
        return report_base_to_novel(rb, rn, split)
    names = sorted({r.label for r in val})
    res = evaluate(scorer, ClipDataset(root, val, frames), names, bs)
    return EvalReport(protocol=split.protocol,
                      metrics={"accuracy": res.accuracy, "top5": res.top5},
                      results={"all": res}, split=split)


def primary_metric(report: EvalReport) -> tuple[str, float]:
    if report.protocol == "base_to_novel":
        return "harmonic_mean", float(report.metrics["harmonic_mean"])
    return "accuracy", float(report.metrics["accuracy"])


def build_anchor_inputs(cfg, encoder: DualEncoder, records: list[ClipRecord],
                        root: str | Path, audit_path: str | Path | None = None
                        ) -> tuple[AnchorSet | None, ClipDataset | None, torch.Tensor | None]:
    """Curate the anchor set and precompute its fixed text feature.

    The anchor prompt is encoded vanilla (no soft prompts) through the
    frozen text tower, so its feature is a constant of the backbone.
    """
    k = cfg["anchors.k"]
    if k == 0:
        return None, None, None
    pool = split_records(records, "anchor")
    if not pool:
        raise ValueError("dataset has no anchor split but anchors.k > 0")
    task_labels = sorted({r.label for r in split_records(records, "train")})
    pool_labels = sorted({r.label for r in pool})
    kept, _ = filter_anchor_labels(pool_labels, task_labels,
                                   matcher=cfg["anchors.matcher"],
                                   audit_path=str(audit_path) if audit_path else None)
    pool = [r for r in pool if r.label in set(kept)]
    if not pool:
        raise ValueError("label filtering removed every anchor candidate")
    anchor_set = sample_anchor_videos([r.ref for r in pool],
                                      [r.label for r in pool], k,
                                      seed=cfg["seed"])
    ref_to_rec = {r.ref: r for r in pool}
    anchor_recs = [ref_to_rec[ref] for ref in anchor_set.clip_refs]
    anchor_dataset = ClipDataset(root, anchor_recs, frames=cfg["train.frames"])
    ids = encoder.vocab.tokenize(build_anchor_prompt())
    seq = encoder.embed_words(ids)
    with torch.no_grad():
        anchor_text = encoder.encode_text_batch(seq.tokens.unsqueeze(0), seq.roles)
    return anchor_set, anchor_dataset, anchor_text


def run_training(cfg, run_dir: str | Path, resume: bool = False,
                 stop_after_epoch: int | None = None) -> dict:
    """The main prompt-tuning pipeline: dataset, backbone, hard prompt,
    anchors, tuning loop with per-epoch validation, checkpoints, report.

    Writes config.snapshot, run.jsonl, anchors.jsonl (when anchors are on),
    checkpoints/{best,last}.ckpt, and run.meta.json (wall clock lives there,
    outside the deterministic record). Returns a summary dict including the
    final evaluation report.
    """
    started = time.time()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "config.snapshot").write_text(cfg.snapshot())

    root = Path(cfg["data.root"])
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, vocab, _ = ensure_backbone(cfg, records, root)
    hard, provenance = ensure_hard_prompt(cfg, encoder, records, root)
    bank = PromptBank.from_config(cfg, encoder.config, hard=hard,
                                  hard_provenance=provenance, seed=cfg["seed"],
                                  text_init=template_prompt_init(encoder))
    hard_before = bank.hard.detach().clone()

    split = make_split(cfg, records)
    selected, class_names = select_training_records(cfg, records, split)
    dataset = ClipDataset(root, selected, frames=cfg["train.frames"])
    train_cfg = TrainConfig.from_config(cfg, stage="main")
    loss_cfg = LossConfig.from_config(cfg)
    if (cfg["anchors.k"] == 0 or train_cfg.anchor_batch_size == 0) \
            and loss_cfg.combine == "convex_eq10" and loss_cfg.omega != 1.0:
        raise ValueError("anchors disabled: convex combination requires omega = 1.0")

    audit = run_dir / "anchors.jsonl"
    if not resume and audit.exists():
        audit.unlink()
    anchor_set, anchor_dataset, anchor_text = build_anchor_inputs(
        cfg, encoder, records, root, audit_path=audit if not resume else None)

    start_epoch = 0
    optimizer_state = None
    best_metric = -math.inf
    last_path = run_dir / "checkpoints" / "last.ckpt"
    best_path = run_dir / "checkpoints" / "best.ckpt"
    if resume:
        if not last_path.exists():
            raise CheckpointError(f"resume requested but {last_path} is missing")
        meta, optimizer_state = load_run_checkpoint(last_path, bank)
        if meta["config_hash"] != cfg.hash():
            raise CheckpointError(
                f"checkpoint config hash {meta['config_hash']} does not match "
                f"current config {cfg.hash()}")
        start_epoch = int(meta["epoch"]) + 1
        best_metric = float(meta["best_metric"])

    vocab.accessed.clear()
    vocab.record_access = True
    log = RunLog(run_dir / "run.jsonl", resume=resume)
    if not resume:
        log.write({"kind": "run", "stage": "main", "seed": cfg["seed"],
                   "config_hash": cfg.hash(), "protocol": split.protocol,
                   "n_train_clips": len(dataset), "classes": class_names,
                   "anchors_k": 0 if anchor_set is None else anchor_set.k,
                   "hard_provenance": provenance})

    history: list[dict] = []
    final_report: dict[str, EvalReport] = {}

    def on_epoch_end(epoch: int, mean_loss: float, optimizer, global_step: int):
        nonlocal best_metric
        vocab.record_access = False
        report = evaluate_protocol(cfg, encoder, bank, records, root, split)
        vocab.record_access = True
        metric_name, metric = primary_metric(report)
        improved = metric > best_metric
        if improved:
            best_metric = metric
        record = {"kind": "epoch", "epoch": epoch, "mean_loss": mean_loss,
                  "metrics": {k: report.metrics[k] for k in sorted(report.metrics)},
                  "metric_name": metric_name, "best_so_far": best_metric,
                  "improved": improved}
        log.write(record)
        history.append(record)
        save_run_checkpoint(last_path, cfg, bank, optimizer, epoch,
                            global_step, best_metric, metric_name, split)
        if improved:
            save_run_checkpoint(best_path, cfg, bank, optimizer, epoch,
                                global_step, best_metric, metric_name, split)
        final_report["last"] = report

    stats = _fit_prompts(
        encoder, bank, dataset, class_names, train_cfg, loss_cfg,
        anchor_set, anchor_dataset, anchor_text, log, cfg["seed"],
        on_epoch_end=on_epoch_end, start_epoch=start_epoch,
        optimizer_state=optimizer_state, stop_after_epoch=stop_after_epoch)

    vocab.record_access = False
    accessed = sorted(vocab.accessed)
    if split.protocol == "zero_shot":
        task_names = {r.label for r in split_records(records, "train")}
        leaked = sorted(task_names & set(accessed))
        if leaked:
            raise RuntimeError(
                f"zero-shot protocol leaked task class names into training: {leaked}")

    if not torch.equal(bank.hard, hard_before):
        raise RuntimeError("hard prompt changed during main tuning")

    if "last" not in final_report:
        # zero planned epochs: still evaluate once so the run has a report
        final_report["last"] = evaluate_protocol(cfg, encoder, bank, records,
                                                 root, split)

    report = final_report["last"]
    summary = {
        "protocol": split.protocol,
        "metrics": report.metrics,
        "best_metric": best_metric if best_metric > -math.inf else None,
        "epochs_run": stats.get("epochs_run", 0),
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "hard_provenance": provenance,
        "anchors_k": 0 if anchor_set is None else anchor_set.k,
        "history": history,
        "accessed_words": accessed,
    }
    (run_dir / "run.meta.json").write_text(json.dumps(
        {"wall_clock_seconds": time.time() - started,
         "started_unix": started}, sort_keys=True, indent=1) + "\n")
    return {"summary": summary, "report": report, "bank": bank,
            "encoder": encoder, "records": records, "split": split,
            "run_dir": str(run_dir)}

