"""Best-path and prefix beam-search decoding of CTC token posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .losses import BLANK

DEFAULT_BEAM_WIDTH = 8


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float

    def __post_init__(self):
        if BLANK in self.tokens:
            raise ValueError("hypotheses never contain the blank token")

    @property
    def prob(self) -> float:
        return math.exp(self.logprob)


def collapse(path: Iterable[int], blank: int = BLANK) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(int(sym))
        prev = sym
    return tuple(out)


def greedy_decode(asr_logprob: np.ndarray) -> Hypothesis:
    """Per-frame argmax (lowest index wins ties), collapsed."""
    asr_logprob = np.asarray(asr_logprob, dtype=np.float64)
    if asr_logprob.shape[0] < 1:
        raise ValueError("greedy_decode needs at least one frame")
    best = np.argmax(asr_logprob, axis=1)
    score = float(asr_logprob[np.arange(best.shape[0]), best].sum())
    return Hypothesis(collapse(best.tolist()), score)


def prefix_beam_search(
    asr_logprob: np.ndarray,
    width: int = DEFAULT_BEAM_WIDTH,
    criterion: str = "sum",
) -> list[Hypothesis]:
    """CTC prefix beam search without language model.

    Each prefix carries the log-probability of paths ending in blank and in a
    non-blank symbol. ``criterion="sum"`` marginalises over alignments;
    ``criterion="max"`` keeps only the best alignment (Viterbi), which makes
    ``width=1`` coincide with best-path decoding. Hypotheses are ranked by
    total log-probability, ties broken by the lexicographically smaller prefix.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if criterion == "sum":
        merge = np.logaddexp
    elif criterion == "max":
        merge = max
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    lp = np.asarray(asr_logprob, dtype=np.float64)
    neg_inf = -math.inf

    def total(pb, pnb):
        return float(merge(pb, pnb))

    def key(item):
        prefix, (pb, pnb) = item
        return (-total(pb, pnb), prefix)

    beam: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, neg_inf)}
    vocab = lp.shape[1]
    for t in range(lp.shape[0]):
        row = lp[t].tolist()
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, pb=neg_inf, pnb=neg_inf):
            cur = nxt.get(prefix)
            if cur is None:
                nxt[prefix] = [pb, pnb]
            else:
                cur[0] = float(merge(cur[0], pb))
                cur[1] = float(merge(cur[1], pnb))

        for prefix, (pb, pnb) in beam.items():
            stay = total(pb, pnb)
            add(prefix, pb=stay + row[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(vocab):
                if c == BLANK:
                    continue
                if c == last:
                    add(prefix, pnb=pnb + row[c])
                    add(prefix + (c,), pnb=pb + row[c])
                else:
                    add(prefix + (c,), pnb=stay + row[c])
        ranked = sorted(((p, tuple(v)) for p, v in nxt.items()), key=key)
        beam = dict(ranked[:width])

    final = sorted(beam.items(), key=key)
    return [Hypothesis(prefix, total(pb, pnb)) for prefix, (pb, pnb) in final]


def tokens_to_text(tokens: Sequence[int], vocab: Sequence[str]) -> str:
    return "".join(vocab[t] for t in tokens)


def text_to_tokens(text: str, vocab: Sequence[str], unk: str = "<unk>") -> list[int]:
    index = {sym: i for i, sym in enumerate(vocab)}
    unk_id = index.get(unk)
    out = []
    for ch in text:
        if ch in index:
            out.append(index[ch])
        elif unk_id is not None:
            out.append(unk_id)
        else:
            raise KeyError(f"{ch!r} not in vocabulary and no {unk} symbol")
    return out


def load_vocab(path) -> list[str]:
    """One token per line; line 0 must be ``<blank>``."""
    with open(path, encoding="utf-8") as fh:
        vocab = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if not vocab or vocab[0] != "<blank>":
        raise ValueError(f"{path}: first vocabulary entry must be <blank>")
    for required in ("<unk>", "<sos/eos>"):
        if required not in vocab:
            raise ValueError(f"{path}: vocabulary lacks {required}")
    return vocab
