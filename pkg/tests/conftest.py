"""Shared fixtures: a miniature dataset + backbone for fast unit tests.

The tiny preset shrinks every axis (classes, clips, encoder width, epochs)
so pipeline tests run in seconds. Quality is irrelevant here; correctness
tests that need a trained model at the real scale live in
test_acceptance.py, which builds the full preset once.
"""

from __future__ import annotations

import pytest

from anchortune.config import load_config
from anchortune.data import SyntheticSpec, ensure_dataset
from anchortune.training import ensure_backbone, ensure_hard_prompt

# overrides shrinking everything; tests that need other values layer on top
TINY = [
    "data.n_classes=4",
    "data.clips_per_class=4",
    "data.val_clips_per_class=2",
    "data.anchor_kinds=2",
    "data.anchor_clips_per_kind=4",
    "data.pretrain_kinds=2",
    "data.pretrain_clips_per_kind=4",
    "data.pretrain_val_clips_per_kind=1",
    "data.backbone_clips_per_kind=2",
    "data.distractor_clips=4",
    "data.frames=4",
    "data.frame_size=16",
    "encoder.visual_layers=2",
    "encoder.text_layers=2",
    "encoder.d_v=32",
    "encoder.d_t=32",
    "encoder.d_joint=16",
    "encoder.patch_size=8",
    "encoder.heads=2",
    "backbone.epochs=2",
    "backbone.batch_size=16",
    "hard.epochs=1",
    "prompt.text_len=4",
    "prompt.visual_len=2",
    "prompt.depth_text=2",
    "prompt.depth_visual=2",
    "train.epochs=2",
    "train.batch_size=8",
    "train.shots=2",
    "train.frames=4",
    "anchors.k=4",
]


def tiny_config(root, extra: list[str] | None = None, seed: int | None = None):
    """Tiny-preset config rooted at ``root`` with optional extra overrides."""
    return load_config(None, [f"data.root={root}"] + TINY + (extra or []), seed)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Dataset + trained-but-terrible backbone + hard prompt, built once."""
    root = tmp_path_factory.mktemp("tiny_root")
    cfg = tiny_config(root)
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, _, _ = ensure_backbone(cfg, records, root)
    ensure_hard_prompt(cfg, encoder, records, root)
    return root


@pytest.fixture()
def tiny_cfg(tiny_root):
    return tiny_config(tiny_root)


# ---- acceptance reporting -------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("benchmark claim checks")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
