"""Synthetic motion-recognition benchmark.

Each clip is a white Gaussian blob oscillating along a fixed orientation
through one cell of a 4x4 lattice, composited over a named procedural
background. A motion kind is a (cell, orientation) pair, giving a catalog
of 64 kinds; contiguous kind ranges become the task classes, the anchor
pool, and the hard-prompt source split.

The background channel carries the controlled confound: task clips of
base-half classes draw a class-paired background with probability rho
(train and validation alike), while every other split draws backgrounds
uniformly. Captions used for backbone pre-training name the background, so
background directions exist in the joint space for prompts to exploit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_KINDS = 64
GRID = 4
ORIENT_WORDS = ("slide", "climb", "drift", "spin")
ORIENT_DEGREES = (0.0, 90.0, 45.0, 135.0)
# label sits last so the readout token separates classes from step one
CAPTION_TEMPLATE = "a video on {background} background of a person doing {label}"

# name -> (style, params); rendered procedurally, no stored assets.
# Colors sit near mid-gray on purpose: the patterns must stay linearly
# decodable without drowning out the small bright blob that carries the
# class signal.
BACKGROUNDS: dict[str, tuple] = {
    "crimson": ("solid", (0.50, 0.28, 0.29)),
    "azure": ("solid", (0.28, 0.40, 0.52)),
    "moss": ("solid", (0.29, 0.45, 0.31)),
    "amber": ("solid", (0.53, 0.45, 0.28)),
    "dusk": ("vgrad", ((0.28, 0.28, 0.38), (0.42, 0.30, 0.44))),
    "dawn": ("hgrad", ((0.52, 0.38, 0.28), (0.58, 0.53, 0.43))),
    "slate": ("checker", ((0.30, 0.31, 0.33), (0.39, 0.40, 0.42), 8)),
    "sand": ("checker", ((0.50, 0.46, 0.38), (0.55, 0.52, 0.45), 4)),
}
BACKGROUND_NAMES = tuple(BACKGROUNDS)

SPLITS = ("train", "val", "anchor", "pretrain_train", "pretrain_val", "backbone",
          "distractor")


class ManifestError(ValueError):
    """Malformed or inconsistent clip manifest."""


def kind_cell(kind: int) -> int:
    return kind % (GRID * GRID)


def kind_orientation(kind: int) -> int:
    return kind // (GRID * GRID)


def kind_name(kind: int) -> str:
    """Single-token class name: orientation word + zero-padded kind id."""
    if not 0 <= kind < MAX_KINDS:
        raise ValueError(f"kind {kind} outside catalog [0, {MAX_KINDS})")
    return f"{ORIENT_WORDS[kind_orientation(kind)]}{kind:02d}"


def cell_center(cell: int, size: int) -> tuple[float, float]:
    """(row, col) center of a lattice cell; (4 + 8i, 4 + 8j) at size 32."""
    edge = size / GRID
    return (edge / 2 + edge * (cell // GRID), edge / 2 + edge * (cell % GRID))


def render_background(name: str, size: int) -> np.ndarray:
    """(size, size, 3) float32 pattern for a named background."""
    if name not in BACKGROUNDS:
        raise ValueError(f"unknown background {name!r}")
    style, params = BACKGROUNDS[name]
    if style == "solid":
        return np.broadcast_to(np.float32(params), (size, size, 3)).copy()
    if style == "vgrad":
        top, bottom = np.float32(params[0]), np.float32(params[1])
        ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
        return np.broadcast_to(top * (1 - ramp) + bottom * ramp,
                               (size, size, 3)).copy()
    if style == "hgrad":
        left, right = np.float32(params[0]), np.float32(params[1])
        ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)[None, :, None]
        return np.broadcast_to(left * (1 - ramp) + right * ramp,
                               (size, size, 3)).copy()
    dark, light, block = np.float32(params[0]), np.float32(params[1]), params[2]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = (((yy // block) + (xx // block)) % 2).astype(np.float32)[..., None]
    return dark * (1 - mask) + light * mask


def render_clip(kind: int, frames: int, size: int, background: str,
                rng: np.random.Generator, noise_sigma: float = 0.02) -> np.ndarray:
    """(T, size, size, 3) float32 clip of one oscillation, pixel range [0,1].

    The blob is elongated along its motion axis (a motion-blur streak), so a
    single frame already carries the orientation; the oscillation adds the
    temporal confirmation. Per-clip randomness: phase, amplitude, and blob
    width, plus the additive pixel noise. Motion axis and cell come from the
    kind.
    """
    cy, cx = cell_center(kind_cell(kind), size)
    theta = math.radians(ORIENT_DEGREES[kind_orientation(kind)])
    dx, dy = math.cos(theta), math.sin(theta)
    scale = size / 32.0
    amplitude = rng.uniform(2.2, 3.2) * scale
    sigma = rng.uniform(1.2, 1.7) * scale
    sig_par, sig_perp = 1.8 * sigma, 0.7 * sigma
    phase = rng.uniform(0.0, 2.0 * math.pi)

    bg = render_background(background, size)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    clip = np.empty((frames, size, size, 3), dtype=np.float32)
    for t in range(frames):
        offset = amplitude * math.sin(2.0 * math.pi * t / frames + phase)
        py, px = cy + offset * dy, cx + offset * dx
        u = (xx - px) * dx + (yy - py) * dy
        v = -(xx - px) * dy + (yy - py) * dx
        m = np.exp(-(u * u / (2.0 * sig_par * sig_par)
                     + v * v / (2.0 * sig_perp * sig_perp)))
        clip[t] = bg * (1.0 - m[..., None]) + m[..., None]
    if noise_sigma > 0:
        clip += rng.normal(0.0, noise_sigma, clip.shape).astype(np.float32)
    return np.clip(clip, 0.0, 1.0)


def sample_frames(clip: np.ndarray, t_out: int) -> np.ndarray:
    """Uniform temporal resample to t_out frames: index floor((i+0.5)T/t_out).

    Upsampling repeats frames; t_out equal to T returns the clip unchanged.
    """
    if t_out < 1:
        raise ValueError("t_out must be >= 1")
    t = clip.shape[0]
    idx = np.floor((np.arange(t_out) + 0.5) * t / t_out).astype(np.int64)
    return clip[idx]


def write_clip(path: Path, clip: np.ndarray) -> None:
    """Store a clip as four little-endian int32s (T, H, W, 3) followed by the
    float32 pixel data."""
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ValueError(f"clip must be (T,H,W,3), got {clip.shape}")
    header = np.asarray(clip.shape, dtype="<i4").tobytes()
    path.write_bytes(header + np.ascontiguousarray(clip, dtype="<f4").tobytes())


def read_clip(path: Path) -> np.ndarray:
    """Inverse of write_clip; validates the header against the payload."""
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ManifestError(f"{path}: truncated clip header")
    shape = tuple(int(v) for v in np.frombuffer(raw[:16], dtype="<i4"))
    if shape[-1] != 3 or any(v < 1 for v in shape):
        raise ManifestError(f"{path}: bad shape header {shape}")
    data = np.frombuffer(raw[16:], dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ManifestError(
            f"{path}: payload holds {data.size} floats, header {shape} needs {expected}")
    return data.reshape(shape).copy()


@dataclass(frozen=True)
class ClipRecord:
    """One manifest line: where a clip lives and what it shows."""

    ref: str
    label: str
    split: str
    background: str
    kind: int
    frames: int
    size: int

    def to_json(self) -> str:
        return json.dumps({
            "ref": self.ref, "label": self.label, "split": self.split,
            "background": self.background, "kind": self.kind,
            "frames": self.frames, "size": self.size,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        obj = json.loads(line)
        missing = {"ref", "label", "split", "background", "kind", "frames", "size"} - set(obj)
        if missing:
            raise ManifestError(f"missing fields {sorted(missing)}")
        rec = cls(**{k: obj[k] for k in
                     ("ref", "label", "split", "background", "kind", "frames", "size")})
        if rec.split not in SPLITS:
            raise ManifestError(f"unknown split {rec.split!r}")
        if rec.background not in BACKGROUNDS:
            raise ManifestError(f"unknown background {rec.background!r}")
        return rec


@dataclass(frozen=True)
class SyntheticSpec:
    """Generation parameters; defaults match the config schema."""

    seed: int = 7
    n_classes: int = 16
    clips_per_class: int = 16
    val_clips_per_class: int = 12
    anchor_kinds: int = 8
    anchor_clips_per_kind: int = 8
    pretrain_kinds: int = 8
    pretrain_clips_per_kind: int = 16
    pretrain_val_clips_per_kind: int = 2
    backbone_clips_per_kind: int = 8
    distractor_clips: int = 32
    frames: int = 8
    frame_size: int = 32
    background_kinds: int = 8
    rho: float = 0.9
    noise_sigma: float = 0.02

    def __post_init__(self):
        total = self.n_classes + self.anchor_kinds + self.pretrain_kinds
        if total > MAX_KINDS:
            raise ValueError(f"{total} kinds requested, catalog holds {MAX_KINDS}")
        if self.distractor_clips > 0 and total >= MAX_KINDS:
            raise ValueError("no catalog kinds left for distractor clips")
        if not 1 <= self.background_kinds <= len(BACKGROUNDS):
            raise ValueError(f"background_kinds must be in [1, {len(BACKGROUNDS)}]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.frame_size % GRID:
            raise ValueError(f"frame_size must be divisible by {GRID}")

    @property
    def task_kinds(self) -> list[int]:
        return list(range(self.n_classes))

    @property
    def pretrain_kind_ids(self) -> list[int]:
        return list(range(self.n_classes, self.n_classes + self.pretrain_kinds))

    @property
    def anchor_kind_ids(self) -> list[int]:
        # anchors take the catalog slots after the hard-prompt source kinds;
        # at the default sizes their cells coincide with the novel classes'
        # cells (different orientation), so the anchor pool patrols exactly
        # the visual territory prompt tuning tends to colonize
        start = self.n_classes + self.pretrain_kinds
        return list(range(start, start + self.anchor_kinds))

    @property
    def distractor_kind_ids(self) -> list[int]:
        # whatever the named splits left unused; these kinds stay nameless
        # (their clips are captioned with the generic template only)
        return list(range(self.n_classes + self.pretrain_kinds + self.anchor_kinds,
                          MAX_KINDS))

    @property
    def backgrounds(self) -> tuple[str, ...]:
        return BACKGROUND_NAMES[: self.background_kinds]

    @classmethod
    def from_config(cls, cfg) -> "SyntheticSpec":
        return cls(
            seed=cfg["data.seed"],
            n_classes=cfg["data.n_classes"],
            clips_per_class=cfg["data.clips_per_class"],
            val_clips_per_class=cfg["data.val_clips_per_class"],
            anchor_kinds=cfg["data.anchor_kinds"],
            anchor_clips_per_kind=cfg["data.anchor_clips_per_kind"],
            pretrain_kinds=cfg["data.pretrain_kinds"],
            pretrain_clips_per_kind=cfg["data.pretrain_clips_per_kind"],
            pretrain_val_clips_per_kind=cfg["data.pretrain_val_clips_per_kind"],
            backbone_clips_per_kind=cfg["data.backbone_clips_per_kind"],
            distractor_clips=cfg["data.distractor_clips"],
            frames=cfg["data.frames"],
            frame_size=cfg["data.frame_size"],
            background_kinds=cfg["data.background_kinds"],
            rho=cfg["data.rho"],
            noise_sigma=cfg["data.noise_sigma"],
        )


def base_half_labels(labels: list[str]) -> set[str]:
    """First ceil(n/2) labels in sorted order; the half treated as 'seen'.

    Kept in sync with the evaluation split rule (equal clip counts make the
    frequency sort a pure name sort here); a test pins the agreement.
    """
    ordered = sorted(set(labels))
    return set(ordered[: math.ceil(len(ordered) / 2)])


def _clip_stream(spec: SyntheticSpec, split: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS.index(split)]))


def generate_synthetic_dataset(spec: SyntheticSpec, root: str | Path,
                               force: bool = False) -> Path:
    """Write clips/ and manifest.jsonl under root; returns the manifest path.

    Deterministic in spec.seed: every random draw comes from per-split
    streams in a fixed iteration order, so regeneration is byte-identical.
    """
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to regenerate")
    (root / "clips").mkdir(parents=True, exist_ok=True)

    bgs = spec.backgrounds
    task_labels = [kind_name(k) for k in spec.task_kinds]
    base_half = base_half_labels(task_labels)
    class_index = {name: i for i, name in enumerate(sorted(task_labels))}

    plan: list[tuple[str, list[int], int]] = [
        ("train", spec.task_kinds, spec.clips_per_class),
        ("val", spec.task_kinds, spec.val_clips_per_class),
        ("anchor", spec.anchor_kind_ids, spec.anchor_clips_per_kind),
        ("pretrain_train", spec.pretrain_kind_ids, spec.pretrain_clips_per_kind),
        ("pretrain_val", spec.pretrain_kind_ids, spec.pretrain_val_clips_per_kind),
        ("backbone",
         spec.task_kinds + spec.anchor_kind_ids + spec.pretrain_kind_ids,
         spec.backbone_clips_per_kind),
    ]

    records: list[ClipRecord] = []
    for split, kinds, per_kind in plan:
        rng = _clip_stream(spec, split)
        for kind in kinds:
            label = kind_name(kind)
            correlated = split in ("train", "val") and label in base_half
            for j in range(per_kind):
                if correlated and rng.random() < spec.rho:
                    bg = bgs[class_index[label] % len(bgs)]
                else:
                    bg = bgs[rng.integers(len(bgs))]
                clip = render_clip(kind, spec.frames, spec.frame_size, bg,
                                   rng, spec.noise_sigma)
                ref = f"clips/{split}_{label}_{j:04d}.f32"
                write_clip(root / ref, clip)
                records.append(ClipRecord(ref, label, split, bg, kind,
                                          spec.frames, spec.frame_size))

    # distractors: clips of leftover catalog kinds, one flat pool with random
    # kind and background per clip; they stay nameless downstream
    rng = _clip_stream(spec, "distractor")
    pool = spec.distractor_kind_ids
    for j in range(spec.distractor_clips):
        kind = pool[int(rng.integers(len(pool)))]
        bg = bgs[rng.integers(len(bgs))]
        clip = render_clip(kind, spec.frames, spec.frame_size, bg,
                           rng, spec.noise_sigma)
        ref = f"clips/distractor_{kind_name(kind)}_{j:04d}.f32"
        write_clip(root / ref, clip)
        records.append(ClipRecord(ref, kind_name(kind), "distractor", bg, kind,
                                  spec.frames, spec.frame_size))

    with open(manifest_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    return manifest_path


def load_manifest(path: str | Path) -> list[ClipRecord]:
    """Parse manifest.jsonl; errors carry 1-based line numbers and duplicate
    clip refs are rejected."""
    path = Path(path)
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = ClipRecord.from_json(line)
            except (json.JSONDecodeError, ManifestError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.ref in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip ref {rec.ref!r}")
            seen.add(rec.ref)
            records.append(rec)
    return records


def load_clip(root: str | Path, rec: ClipRecord) -> np.ndarray:
    """Read one clip back as (T, size, size, 3), cross-checking the header
    against the manifest record."""
    clip = read_clip(Path(root) / rec.ref)
    expected = (rec.frames, rec.size, rec.size, 3)
    if clip.shape != expected:
        raise ManifestError(
            f"{rec.ref}: clip shape {clip.shape} disagrees with manifest {expected}")
    return clip


class ClipDataset:
    """Records of one split plus cached pixel access."""

    def __init__(self, root: str | Path, records: list[ClipRecord],
                 frames: int | None = None, cache: bool = True):
        self.root = Path(root)
        self.records = list(records)
        self.frames = frames
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def load(self, index: int) -> np.ndarray:
        rec = self.records[index]
        if self._cache is not None and rec.ref in self._cache:
            clip = self._cache[rec.ref]
        else:
            clip = load_clip(self.root, rec)
            if self._cache is not None:
                self._cache[rec.ref] = clip
        if self.frames is not None and self.frames != clip.shape[0]:
            clip = sample_frames(clip, self.frames)
        return clip

    def labels(self) -> list[str]:
        return [rec.label for rec in self.records]

    def label_set(self) -> list[str]:
        return sorted({rec.label for rec in self.records})


def split_records(records: list[ClipRecord], split: str) -> list[ClipRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [rec for rec in records if rec.split == split]


def dataset_vocab_texts(records: list[ClipRecord]) -> list[str]:
    """Every text the pipeline might tokenize for this dataset: captions for
    all named kinds and backgrounds, plus the generic anchor template.

    Distractor clips are nameless by design (only ever captioned with the
    generic template), so their labels stay out of the vocabulary.
    """
    from .anchors import build_anchor_prompt

    labels = sorted({rec.label for rec in records if rec.split != "distractor"})
    bgs = sorted({rec.background for rec in records})
    texts = [CAPTION_TEMPLATE.format(label=lbl, background=bg)
             for lbl in labels for bg in bgs]
    texts.append(build_anchor_prompt())
    return texts


def caption_for(rec: ClipRecord) -> str:
    return CAPTION_TEMPLATE.format(label=rec.label, background=rec.background)


def ensure_dataset(spec: SyntheticSpec, root: str | Path) -> list[ClipRecord]:
    """Load the manifest at root, generating the dataset first if absent."""
    manifest = Path(root) / "manifest.jsonl"
    if not manifest.exists():
        generate_synthetic_dataset(spec, root)
    return load_manifest(manifest)
