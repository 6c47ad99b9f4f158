"""Keyword max-pooling loss, CTC loss and their weighted combination.

Both losses return the gradient with respect to the *logits* feeding the
respective head (pre-sigmoid for keywords, pre-log-softmax for tokens).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

FILLER = -1
PROB_CLAMP = 1e-7
BLANK = 0


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be aligned to the given number of frames."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def max_pool_frames(kws_prob: np.ndarray) -> np.ndarray:
    """Index of the (earliest) max-probability frame for every keyword."""
    return np.argmax(kws_prob, axis=0)


def max_pooling_loss(kws_prob: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Binary cross-entropy at each keyword's max-probability frame.

    With ``s_j = max_t kws_prob[t, j]`` the loss is ``-log s_k - sum_{j != k} log(1 - s_j)``
    for target keyword ``k`` and ``-sum_j log(1 - s_j)`` for ``FILLER``. Probabilities
    are clamped to ``[1e-7, 1 - 1e-7]``; a clamped entry gets zero gradient.

    Returns the loss and its gradient with respect to the keyword logits.
    """
    kws_prob = np.asarray(kws_prob, dtype=np.float64)
    n_frames, n_kw = kws_prob.shape
    if n_frames < 1:
        raise ValueError("max_pooling_loss needs at least one frame")
    if target != FILLER and not 0 <= target < n_kw:
        raise ValueError(f"target {target} out of range for {n_kw} keywords")

    peak_frames = max_pool_frames(kws_prob)
    cols = np.arange(n_kw)
    peaks = kws_prob[peak_frames, cols]
    clamped = np.clip(peaks, PROB_CLAMP, 1.0 - PROB_CLAMP)
    live = clamped == peaks

    positive = cols == target
    loss = -np.sum(np.where(positive, np.log(clamped), np.log1p(-clamped)))
    # d/dz of -log(sigmoid(z)) is p - 1; of -log(1 - sigmoid(z)) is p
    dpeak = np.where(positive, peaks - 1.0, peaks) * live
    grad = np.zeros_like(kws_prob)
    grad[peak_frames, cols] = dpeak
    return float(loss), grad


def ctc_min_frames(tokens: Sequence[int]) -> int:
    tokens = list(tokens)
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def _ctc_lattice(asr_logprob: np.ndarray, tokens: Sequence[int]):
    n_frames, vocab = asr_logprob.shape
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"token index out of range for vocabulary of {vocab}")
    if np.any(tokens == BLANK):
        raise ValueError("label sequence must not contain the blank index")
    if n_frames < ctc_min_frames(tokens):
        raise CTCInfeasibleError(
            f"{len(tokens)} labels need {ctc_min_frames(tokens)} frames, got {n_frames}"
        )
    ext = np.zeros(2 * len(tokens) + 1, dtype=np.int64)
    ext[1::2] = tokens
    skip = np.zeros(ext.shape[0], dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip, asr_logprob[:, ext]


@njit(cache=True)
def _logadd(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def _ctc_alpha(lp, skip):
    n_frames, n_states = lp.shape
    alpha = np.full((n_frames, n_states), -np.inf)
    alpha[0, 0] = lp[0, 0]
    if n_states > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, n_frames):
        for s in range(n_states):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _logadd(acc, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                acc = _logadd(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + lp[t, s]
    return alpha


@njit(cache=True)
def _ctc_beta(lp, skip):
    n_frames, n_states = lp.shape
    beta = np.full((n_frames, n_states), -np.inf)
    beta[n_frames - 1, n_states - 1] = lp[n_frames - 1, n_states - 1]
    if n_states > 1:
        beta[n_frames - 1, n_states - 2] = lp[n_frames - 1, n_states - 2]
    for t in range(n_frames - 2, -1, -1):
        for s in range(n_states):
            acc = beta[t + 1, s]
            if s + 1 < n_states:
                acc = _logadd(acc, beta[t + 1, s + 1])
            if s + 2 < n_states and skip[s + 2]:
                acc = _logadd(acc, beta[t + 1, s + 2])
            beta[t, s] = acc + lp[t, s]
    return beta


def ctc_loss(asr_logprob: np.ndarray, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``tokens`` under CTC, plus its gradient.

    ``asr_logprob`` is a frames x vocab matrix of log-softmax outputs (blank at
    index 0). The likelihood comes from the log-space forward (alpha)
    recursion; the gradient with respect to the pre-softmax logits uses the
    backward (beta) recursion: ``softmax - state occupancy``.
    """
    asr_logprob = np.asarray(asr_logprob, dtype=np.float64)
    ext, skip, lp = _ctc_lattice(asr_logprob, tokens)
    lp = np.ascontiguousarray(lp)
    alpha = _ctc_alpha(lp, skip)
    beta = _ctc_beta(lp, skip)
    if ext.shape[0] > 1:
        log_like = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_like = alpha[-1, -1]

    # alpha and beta both include the emission at t
    occupancy = np.exp(alpha + beta - lp - log_like)
    posterior = np.zeros_like(asr_logprob)
    np.add.at(posterior.T, ext, occupancy.T)
    grad = np.exp(asr_logprob) - posterior
    return float(-log_like), grad


@dataclass(frozen=True)
class LossBundle:
    l_ctc: float
    l_wws: float
    l_total: float


def combined_loss(l_ctc: float, l_wws: float, ctc_weight: float = 0.5, wws_weight: float = 1.0) -> LossBundle:
    """Multi-task objective ``ctc_weight * l_ctc + wws_weight * l_wws``."""
    return LossBundle(float(l_ctc), float(l_wws), ctc_weight * l_ctc + wws_weight * l_wws)
