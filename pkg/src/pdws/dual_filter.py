"""Post-processing of keyword posteriors: temporal scoring, a rank-based
threshold filter and a transcript-length filter."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .losses import FILLER

DEFAULT_RANK = 60


@dataclass(frozen=True)
class Decision:
    utt_id: str
    temporal_score: float
    temporal_label: int
    final_label: int

    def __post_init__(self):
        # closed interval: a saturated sigmoid can round to exactly 0 or 1
        if not 0.0 <= self.temporal_score <= 1.0:
            raise ValueError(f"temporal_score {self.temporal_score} outside [0, 1]")
        if self.final_label not in (self.temporal_label, FILLER):
            raise ValueError("final_label must be the temporal label or FILLER")


@dataclass(frozen=True)
class WakeWordList:
    words: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) < 1:
            raise ValueError("need at least one wake word")
        object.__setattr__(self, "words", tuple(self.words))

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, index: int) -> str:
        return self.words[index]

    @property
    def lengths(self) -> tuple[int, ...]:
        # str length in Python counts code points, i.e. Unicode scalars
        return tuple(len(w) for w in self.words)

    @classmethod
    def load(cls, path) -> "WakeWordList":
        with open(path, encoding="utf-8") as fh:
            return cls(tuple(line.strip() for line in fh if line.strip()))


def temporal_scoring(kws_prob: np.ndarray) -> tuple[float, int]:
    """Max posterior over all frames and keywords, and the keyword it belongs to.

    Ties go to the earliest frame, then the lowest keyword index.
    """
    kws_prob = np.asarray(kws_prob, dtype=np.float64)
    if kws_prob.ndim != 2 or kws_prob.shape[0] < 1:
        raise ValueError("temporal_scoring needs a non-empty frames x keywords matrix")
    flat = int(np.argmax(kws_prob))  # row-major: earliest frame, then lowest keyword
    t, k = divmod(flat, kws_prob.shape[1])
    return float(kws_prob[t, k]), int(k)


def make_decision(utt_id: str, kws_prob: np.ndarray) -> Decision:
    score, label = temporal_scoring(kws_prob)
    return Decision(utt_id, score, label, label)


def rank_threshold(scores: Sequence[float], rank: int) -> float:
    """The ``rank``-th highest score (the minimum when ``rank`` exceeds the count)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if len(scores) == 0:
        raise ValueError("no scores to rank")
    ordered = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    return float(ordered[min(rank, ordered.shape[0]) - 1])


def threshold_filter(decisions: Sequence[Decision], rank: int = DEFAULT_RANK) -> list[Decision]:
    """Keep the temporal label of every decision scoring at least the rank-th
    highest score; everything below becomes FILLER. Input order is preserved."""
    if len(decisions) == 0:
        raise ValueError("threshold_filter needs at least one decision")
    thr = rank_threshold([d.temporal_score for d in decisions], rank)
    return [
        replace(d, final_label=d.temporal_label if d.temporal_score >= thr else FILLER)
        for d in decisions
    ]


def asr_filter(decision: Decision, asr1: str, asr2: str, wake_words: WakeWordList) -> Decision:
    """Reject a keyword decision when neither transcript has the wake word's length."""
    label = decision.final_label
    if label == FILLER or not 0 <= label < len(wake_words):
        return decision
    target_len = len(wake_words[label])
    if len(asr1) == target_len or len(asr2) == target_len:
        return decision
    return replace(decision, final_label=FILLER)


def transcript_map(transcripts: Mapping[str, str] | Iterable[tuple[str, str]] | None) -> dict[str, str]:
    """Normalise transcripts to a dict, rejecting duplicate ids."""
    if transcripts is None:
        return {}
    if isinstance(transcripts, Mapping):
        return dict(transcripts)
    out: dict[str, str] = {}
    for utt_id, text in transcripts:
        if utt_id in out:
            raise ValueError(f"duplicate transcript id {utt_id!r}")
        out[utt_id] = text
    return out


def run_dual_filter(
    decisions: Sequence[Decision],
    transcripts1,
    transcripts2,
    wake_words: WakeWordList,
    rank: int = DEFAULT_RANK,
) -> list[Decision]:
    """Threshold filter over the whole batch, then the transcript-length filter.

    A missing transcript counts as the empty string.
    """
    asr1 = transcript_map(transcripts1)
    asr2 = transcript_map(transcripts2)
    return [
        asr_filter(d, asr1.get(d.utt_id, ""), asr2.get(d.utt_id, ""), wake_words)
        for d in threshold_filter(decisions, rank)
    ]


# --------------------------------------------------------------------------
# decisions file (JSON lines)
# --------------------------------------------------------------------------


def decision_to_json(d: Decision) -> dict:
    return {"id": d.utt_id, "score": d.temporal_score, "temporal_label": d.temporal_label, "final_label": d.final_label}


def write_decisions(path, decisions: Iterable[Decision]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(decision_to_json(d)) + "\n")


def read_decisions(path) -> list[Decision]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Decision(str(rec["id"]), float(rec["score"]), int(rec["temporal_label"]), int(rec["final_label"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed decision: {exc}") from exc
    return out
