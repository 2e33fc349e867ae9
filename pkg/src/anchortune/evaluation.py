"""Evaluation protocols: base/novel class splits, accuracy scoring through
a pluggable scorer, harmonic-mean summaries, and embedding export.

A scorer is anything with ``class_features(names) -> (C, d)`` and
``video_features(batch) -> (B, d)``; classification is cosine similarity,
so oracle scorers (e.g. clip centroids) can stand in for the model when a
test needs ground truth.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ClipDataset, ClipRecord

PROTOCOLS = ("base_to_novel", "few_shot", "zero_shot", "full")


FEW_SHOT_COUNTS = (2, 4, 8, 16)


@dataclass(frozen=True)
class SplitSpec:
    """Frozen base/novel class partition plus protocol bookkeeping.

    The split rule is deterministic: order classes by descending training
    frequency, ties by name, and take the first ceil(n/2) as base. The seed
    is recorded for provenance but the rule never consults it.
    """

    base: tuple[str, ...]
    novel: tuple[str, ...]
    seed: int = 0
    protocol: str = "base_to_novel"
    shots: int | None = None

    def __post_init__(self):
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise ValueError(f"classes in both halves: {sorted(overlap)}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "few_shot" and self.shots not in FEW_SHOT_COUNTS:
            raise ValueError(f"few-shot protocol needs shots in {FEW_SHOT_COUNTS}")


def split_base_novel(train_labels: list[str], seed: int = 0) -> SplitSpec:
    """Split the label multiset seen in training into base and novel halves.

    Most frequent classes become base; odd counts give the extra class to
    base. Equal frequencies reduce the rule to a lexicographic split.
    """
    freq = Counter(train_labels)
    if len(freq) < 2:
        raise ValueError("base/novel split needs at least 2 classes")
    ordered = sorted(freq, key=lambda name: (-freq[name], name))
    cut = math.ceil(len(ordered) / 2)
    return SplitSpec(base=tuple(ordered[:cut]), novel=tuple(ordered[cut:]), seed=seed)


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b); defined as 0 when both terms are 0."""
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    if a == 0.0 and b == 0.0:
        warnings.warn("harmonic mean of (0, 0) defined as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class EvalResult:
    """Accuracy of one scoring pass over one clip set and label space.

    All accuracies are percentages in [0, 100]."""

    accuracy: float
    top5: float | None
    n_clips: int
    per_class: dict[str, float]
    class_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "top5": self.top5,
            "n_clips": self.n_clips,
            "per_class": dict(sorted(self.per_class.items())),
            "class_counts": dict(sorted(self.class_counts.items())),
        }


def evaluate(scorer, dataset: ClipDataset, class_names: list[str],
             batch_size: int = 32) -> EvalResult:
    """Score every clip against the class set; top-1 (+top-5 when the label
    space has at least 5 classes)."""
    if not class_names:
        raise ValueError("empty class set")
    if len(set(class_names)) != len(class_names):
        raise ValueError("duplicate class names")
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    for rec in dataset.records:
        if rec.label not in name_to_idx:
            raise ValueError(f"clip label {rec.label!r} not in the class set")

    text = scorer.class_features(list(class_names))
    text = text / text.norm(dim=-1, keepdim=True)
    want5 = len(class_names) >= 5
    hits = 0
    hits5 = 0
    per_class_hits: Counter = Counter()
    per_class_n: Counter = Counter()

    for start in range(0, len(dataset), batch_size):
        recs = dataset.records[start:start + batch_size]
        batch = np.stack([dataset.load(start + i) for i in range(len(recs))])
        with torch.no_grad():
            vid = scorer.video_features(batch)
            vid = vid / vid.norm(dim=-1, keepdim=True)
            scores = vid @ text.T
        order = scores.argsort(dim=-1, descending=True)
        for row, rec in enumerate(recs):
            truth = name_to_idx[rec.label]
            per_class_n[rec.label] += 1
            if int(order[row, 0]) == truth:
                hits += 1
                per_class_hits[rec.label] += 1
            if want5 and truth in order[row, :5].tolist():
                hits5 += 1

    n = len(dataset)
    if n == 0:
        raise ValueError("empty clip set")
    per_class = {name: 100.0 * per_class_hits[name] / per_class_n[name]
                 for name in class_names if per_class_n[name]}
    return EvalResult(
        accuracy=100.0 * hits / n,
        top5=100.0 * hits5 / n if want5 else None,
        n_clips=n,
        per_class=per_class,
        class_counts={k: int(v) for k, v in per_class_n.items()},
    )


@dataclass
class EvalReport:
    """Protocol-level summary combining one or more scoring passes."""

    protocol: str
    metrics: dict[str, float | None]
    results: dict[str, EvalResult]
    split: SplitSpec | None = None

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "results": {k: v.to_dict() for k, v in sorted(self.results.items())},
        }
        if self.split is not None:
            out["split"] = {"base": list(self.split.base),
                            "novel": list(self.split.novel),
                            "seed": self.split.seed}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table(self) -> str:
        """Aligned two-column text table of the headline metrics."""
        rows = [(k, "-" if self.metrics[k] is None else f"{self.metrics[k]:.4f}")
                for k in sorted(self.metrics)]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines)


def report_base_to_novel(base: EvalResult, novel: EvalResult,
                         split: SplitSpec) -> EvalReport:
    hm = harmonic_mean(base.accuracy, novel.accuracy)
    return EvalReport(
        protocol="base_to_novel",
        metrics={"base_accuracy": base.accuracy,
                 "novel_accuracy": novel.accuracy,
                 "harmonic_mean": hm},
        results={"base": base, "novel": novel},
        split=split,
    )


def few_shot_select(records: list[ClipRecord], shots: int,
                    seed: int = 0) -> list[ClipRecord]:
    """Per class, keep ``shots`` clips drawn without replacement, seeded.

    Classes with fewer clips keep everything. Output order follows the
    input manifest order so downstream batching stays deterministic.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    by_label: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_label.setdefault(rec.label, []).append(i)
    keep: set[int] = set()
    for label in sorted(by_label):
        idx = by_label[label]
        if len(idx) <= shots:
            keep.update(idx)
            continue
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, hash_label(label)]))
        chosen = rng.permutation(len(idx))[:shots]
        keep.update(idx[c] for c in chosen)
    return [rec for i, rec in enumerate(records) if i in keep]


def hash_label(label: str) -> int:
    """Stable non-negative integer for seeding per-label streams."""
    h = 2166136261
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def export_embeddings(path: str | Path, scorer, dataset: ClipDataset,
                      limit: int = 500, seed: int = 0,
                      batch_size: int = 32) -> int:
    """Write joint-space video features as TSV; returns the row count.

    Columns: ref, label, split, background, then one column per feature
    dimension. At most ``limit`` rows, subsampled with a seeded draw when
    the set is larger.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    n = len(dataset)
    indices = np.arange(n)
    if n > limit:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3B]))
        indices = np.sort(rng.permutation(n)[:limit])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows_written = 0
    header_written = False
    with open(path, "w", encoding="utf-8") as f:
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            batch = np.stack([dataset.load(int(i)) for i in chunk])
            with torch.no_grad():
                feats = scorer.video_features(batch).cpu().numpy()
            if not header_written:
                dims = "\t".join(f"dim_{j}" for j in range(feats.shape[1]))
                f.write(f"ref\tlabel\tsplit\tbackground\t{dims}\n")
                header_written = True
            for row, i in enumerate(chunk):
                rec = dataset.records[int(i)]
                values = "\t".join(repr(float(v)) for v in feats[row])
                f.write(f"{rec.ref}\t{rec.label}\t{rec.split}\t{rec.background}\t{values}\n")
                rows_written += 1
    return rows_written
