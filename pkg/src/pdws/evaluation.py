"""False-accept / false-reject scoring, exhaustive threshold search and rank sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dual_filter import Decision, threshold_filter
from .losses import FILLER


@dataclass(frozen=True)
class EvalReport:
    n_wake: int
    n_non_wake: int
    n_fr: int
    n_fa: int
    n_wrong_keyword: int = 0

    def __post_init__(self):
        if not 0 <= self.n_fr <= self.n_wake or not 0 <= self.n_fa <= self.n_non_wake:
            raise ValueError("error counts exceed class sizes")

    @property
    def frr(self) -> float:
        return self.n_fr / self.n_wake

    @property
    def far(self) -> float:
        return self.n_fa / self.n_non_wake

    @property
    def score(self) -> float:
        return self.frr + self.far

    def to_json(self) -> dict:
        """Counts plus rates rounded to six decimals."""
        return {
            "n_wake": self.n_wake,
            "n_non_wake": self.n_non_wake,
            "n_fr": self.n_fr,
            "n_fa": self.n_fa,
            "n_wrong_keyword": self.n_wrong_keyword,
            "far": round(self.far, 6),
            "frr": round(self.frr, 6),
            "score": round(self.score, 6),
        }

    def formatted(self) -> str:
        return f"Score {self.score:.6f}  FAR {self.far:.6f}  FRR {self.frr:.6f}"


def load_references(path) -> dict[str, int]:
    """JSON lines ``{"id": ..., "label": k}`` with -1 for non-wake utterances."""
    refs: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["id"] in refs:
                raise ValueError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            refs[str(rec["id"])] = int(rec["label"])
    return refs


def _aligned(decisions: Sequence[Decision], references: Mapping[str, int]) -> np.ndarray:
    missing = [d.utt_id for d in decisions if d.utt_id not in references]
    if missing:
        raise KeyError(f"no reference for {len(missing)} decision(s), e.g. {missing[0]!r}")
    return np.array([references[d.utt_id] for d in decisions], dtype=np.int64)


def score_labels(predicted: np.ndarray, reference: np.ndarray) -> EvalReport:
    wake = reference != FILLER
    n_wake = int(wake.sum())
    n_non_wake = int((~wake).sum())
    if n_wake == 0 or n_non_wake == 0:
        raise ValueError(f"need both classes, got {n_wake} wake and {n_non_wake} non-wake")
    fr = wake & (predicted != reference)
    wrong = wake & (predicted != reference) & (predicted != FILLER)
    fa = ~wake & (predicted != FILLER)
    return EvalReport(n_wake, n_non_wake, int(fr.sum()), int(fa.sum()), int(wrong.sum()))


def score_decisions(decisions: Sequence[Decision], references: Mapping[str, int]) -> EvalReport:
    """Count false rejects over wake utterances and false accepts over the rest.

    A wake utterance labelled with the wrong keyword is a false reject; such
    cases are also tallied in ``n_wrong_keyword``.
    """
    ref = _aligned(decisions, references)
    pred = np.array([d.final_label for d in decisions], dtype=np.int64)
    return score_labels(pred, ref)


def apply_absolute_threshold(decisions: Iterable[Decision], threshold: float) -> list[Decision]:
    return [replace(d, final_label=d.temporal_label if d.temporal_score >= threshold else FILLER) for d in decisions]


def exhaustive_threshold_search(
    decisions: Sequence[Decision], references: Mapping[str, int]
) -> tuple[float, EvalReport]:
    """Try every distinct temporal score (plus +inf) as an absolute threshold.

    Returns the threshold with the lowest score; ties go to lower FAR, then to
    the lower threshold.
    """
    ref = _aligned(decisions, references)
    scores = np.array([d.temporal_score for d in decisions], dtype=np.float64)
    labels = np.array([d.temporal_label for d in decisions], dtype=np.int64)
    candidates = np.append(np.unique(scores), math.inf)
    best = None
    for theta in candidates:
        report = score_labels(np.where(scores >= theta, labels, FILLER), ref)
        key = (report.score, report.far, theta)
        if best is None or key < best[0]:
            best = (key, float(theta), report)
    return best[1], best[2]


def rank_sweep(
    decisions: Sequence[Decision], references: Mapping[str, int], ranks: Sequence[int]
) -> list[tuple[int, EvalReport]]:
    """Threshold-filter at each rank (in the order given) and score."""
    return [(int(r), score_decisions(threshold_filter(decisions, r), references)) for r in ranks]


def parse_rank_range(text: str) -> list[int]:
    """``"55..61"`` -> [55, ..., 61]; also accepts comma lists."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]
