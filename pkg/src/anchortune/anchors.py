"""Anchor curation: pick motion labels semantically disjoint from the task
classes, sample clips for them, and build the generic anchor prompt.

Anchor clips act as off-task exemplars: during tuning their videos are
pulled toward a fixed generic text ("a video of a person doing something
else") and pushed away from the task class texts, which stops the prompts
from latching onto whatever co-occurs with the task classes.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

ANCHOR_TEMPLATE = "a video of a person doing {}"
DEFAULT_ANCHOR_PHRASE = "something else"

STOPWORDS = frozenset(
    "the a an of or and with in on at to for by from is are be doing".split())

LLM_ENDPOINT_ENV = "ANCHORTUNE_LLM_ENDPOINT"
_JACCARD_CUTOFF = 0.5


@dataclass
class LabelMatch:
    """Verdict for one candidate anchor label against the task label set."""

    label: str
    excluded: bool
    rationale: str
    matcher: str = "rule"
    matched_task_label: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "label": self.label,
            "excluded": self.excluded,
            "rationale": self.rationale,
            "matcher": self.matcher,
            "matched_task_label": self.matched_task_label,
        }, sort_keys=True)


def normalize_label(label: str) -> list[str]:
    """Lowercase, fold separators to spaces, drop stopwords, stem lightly."""
    text = label.lower()
    text = re.sub(r"[_\-]+", " ", text)
    text = re.sub(r"[^a-z0-9 ]+", "", text)
    words = [w for w in text.split() if w not in STOPWORDS]
    return [stem(w) for w in words]


def stem(word: str) -> str:
    """Greedy suffix stripping with length guards; not a real stemmer, just
    enough to match inflected forms of short activity phrases."""
    if word.endswith("ing") and len(word) > 4:
        return word[:-3]
    if word.endswith("ed") and len(word) > 3:
        return word[:-2]
    if word.endswith("es") and len(word) > 3:
        return word[:-2]
    if word.endswith("s") and len(word) > 2:
        return word[:-1]
    return word


def same_semantics(a: str, b: str) -> bool:
    """True when the space-collapsed stem strings coincide, so spacing and
    inflection variants of one phrase ("pullup" vs "pull ups") match."""
    return "".join(normalize_label(a)) == "".join(normalize_label(b))


def similarity(a: str, b: str) -> float:
    """Jaccard overlap of the stem sets."""
    sa, sb = set(normalize_label(a)), set(normalize_label(b))
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def rule_match(candidate: str, task_labels: list[str]) -> LabelMatch:
    for task in task_labels:
        if same_semantics(candidate, task):
            return LabelMatch(candidate, True,
                              f"same semantics as task label {task!r}",
                              "rule", task)
    for task in task_labels:
        sim = similarity(candidate, task)
        if sim >= _JACCARD_CUTOFF:
            return LabelMatch(candidate, True,
                              f"stem overlap {sim:.2f} with task label {task!r}",
                              "rule", task)
    return LabelMatch(candidate, False, "no overlapping task label", "rule")


def llm_match(candidate: str, task_labels: list[str],
              endpoint: str | None = None, retries: int = 2,
              timeout: float = 10.0) -> LabelMatch:
    """Ask an external JSON service whether the candidate names a task class.

    POSTs {"candidate", "task_labels"} and expects {"excluded": bool,
    "rationale": str, "matched_task_label": str|null}. On missing endpoint,
    network failure, or malformed replies this falls back to the rule
    matcher and says so in the rationale.
    """
    import requests

    endpoint = endpoint or os.environ.get(LLM_ENDPOINT_ENV, "")
    if not endpoint:
        fallback = rule_match(candidate, task_labels)
        fallback.matcher = "llm"
        fallback.rationale = f"no endpoint configured; rule fallback: {fallback.rationale}"
        return fallback
    last_error = "no attempt made"
    for _ in range(max(1, retries)):
        try:
            reply = requests.post(
                endpoint,
                json={"candidate": candidate, "task_labels": list(task_labels)},
                timeout=timeout)
            reply.raise_for_status()
            payload = reply.json()
            return LabelMatch(
                label=candidate,
                excluded=bool(payload["excluded"]),
                rationale=str(payload.get("rationale", "external match")),
                matcher="llm",
                matched_task_label=payload.get("matched_task_label"),
            )
        except (requests.RequestException, KeyError, ValueError, TypeError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
    fallback = rule_match(candidate, task_labels)
    fallback.matcher = "llm"
    fallback.rationale = f"endpoint failed ({last_error}); rule fallback: {fallback.rationale}"
    return fallback


def filter_anchor_labels(candidates: list[str], task_labels: list[str],
                         matcher: str = "rule", audit_path: str | None = None,
                         endpoint: str | None = None) -> tuple[list[str], list[LabelMatch]]:
    """Keep candidates that name none of the task classes.

    Returns the kept labels in input order plus the full verdict list; when
    ``audit_path`` is given every verdict is appended there as JSON lines.
    """
    if matcher not in ("rule", "llm"):
        raise ValueError(f"unknown matcher {matcher!r}")
    matches = []
    for cand in candidates:
        if matcher == "rule":
            matches.append(rule_match(cand, task_labels))
        else:
            matches.append(llm_match(cand, task_labels, endpoint=endpoint))
    kept = [m.label for m in matches if not m.excluded]
    if audit_path:
        with open(audit_path, "a", encoding="utf-8") as f:
            for m in matches:
                f.write(m.to_json() + "\n")
    return kept, matches


def build_anchor_prompt(phrase: str = DEFAULT_ANCHOR_PHRASE) -> str:
    """Fill the generic template; the default is the fixed 8-word anchor text."""
    phrase = phrase.strip()
    if not phrase:
        raise ValueError("anchor phrase must be non-empty")
    return ANCHOR_TEMPLATE.format(phrase)


@dataclass
class AnchorSet:
    """K sampled anchor clip references plus the prompt texts they share."""

    clip_refs: list[str]
    labels: list[str]
    prompts: list[str] = field(default_factory=lambda: [build_anchor_prompt()])
    seed: int = 0

    def __post_init__(self):
        if len(self.clip_refs) != len(self.labels):
            raise ValueError("clip_refs and labels must align")

    @property
    def k(self) -> int:
        return len(self.clip_refs)


def sample_anchor_videos(pool_refs: list[str], pool_labels: list[str], k: int,
                         seed: int = 0) -> AnchorSet:
    """Draw k clips from the anchor pool without replacement, seeded.

    The draw depends only on (pool order, k, seed), so reruns with one seed
    pick identical anchors.
    """
    if len(pool_refs) != len(pool_labels):
        raise ValueError("pool refs and labels must align")
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > len(pool_refs):
        raise ValueError(f"k={k} exceeds anchor pool size {len(pool_refs)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA2C5]))
    idx = rng.permutation(len(pool_refs))[:k]
    idx = np.sort(idx)
    return AnchorSet(
        clip_refs=[pool_refs[i] for i in idx],
        labels=[pool_labels[i] for i in idx],
        seed=seed,
    )
