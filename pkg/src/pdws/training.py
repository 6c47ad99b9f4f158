"""Adam training of the two-branch model over one stage of the SIC -> SID ->
ENROLL schedule."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import AudioBuffer, AugPolicy, FeatConfig, augment, load_wav, log_mel
from .corpus import UttRecord, select
from .decoding import text_to_tokens
from .model import ModelConfig, ModelParams, backward_batch, init_params, predicted_label, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("sic", "sid", "enroll")
STAGE_DATA = {"sic": ("control", "train"), "sid": ("dysarthric", "train"), "enroll": (None, "enroll")}


class MissingCheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageSpec:
    stage: str
    init: str = "fresh"
    group: str | None = None
    split: str | None = None
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine": per-epoch decay over the stage
    clip_norm: float | None = None  # global gradient-norm cap

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.init not in ("fresh", "checkpoint"):
            raise ValueError(f"init must be 'fresh' or 'checkpoint', got {self.init!r}")
        if self.stage == "sic" and self.init != "fresh":
            raise ValueError("the SIC stage trains from scratch")
        if self.stage != "sic" and self.init != "checkpoint":
            raise ValueError(f"the {self.stage.upper()} stage starts from a checkpoint")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr > 0")

    def epoch_lr(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))

    @classmethod
    def for_stage(cls, stage: str, **kwargs) -> "StageSpec":
        group, split = STAGE_DATA[stage]
        kwargs.setdefault("group", group)
        kwargs.setdefault("split", split)
        kwargs.setdefault("init", "fresh" if stage == "sic" else "checkpoint")
        return cls(stage=stage, **kwargs)


class Adam:
    """Adam with bias correction over a dict of float64 tensors."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainContext:
    """Everything a stage needs besides its own spec."""

    root: Path
    vocab: Sequence[str]
    model_config: ModelConfig
    feat_config: FeatConfig = field(default_factory=FeatConfig)
    aug_policy: AugPolicy | None = None
    noise_pool: Sequence[AudioBuffer] = ()
    ctc_weight: float = 0.5
    wws_weight: float = 1.0
    _audio: dict = field(default_factory=dict, repr=False)
    _feats: dict = field(default_factory=dict, repr=False)

    def audio(self, rec: UttRecord) -> AudioBuffer:
        if rec.utt_id not in self._audio:
            self._audio[rec.utt_id] = load_wav(self.root / rec.wav)
        return self._audio[rec.utt_id]

    def clean_features(self, rec: UttRecord) -> np.ndarray:
        if rec.utt_id not in self._feats:
            self._feats[rec.utt_id] = log_mel(self.audio(rec), self.feat_config).data
        return self._feats[rec.utt_id]

    def train_features(self, rec: UttRecord, rng: np.random.Generator) -> np.ndarray:
        if self.aug_policy is None:
            return self.clean_features(rec)
        return log_mel(augment(self.audio(rec), self.noise_pool, self.aug_policy, rng), self.feat_config).data

    def tokens(self, rec: UttRecord) -> list[int] | None:
        if self.ctc_weight == 0.0:
            return None
        return text_to_tokens(rec.text, self.vocab)


def compute_cmvn(feature_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(feature_list, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return mean, 1.0 / np.maximum(std, 1e-3)


def train_stage(
    spec: StageSpec,
    manifest: Sequence[UttRecord],
    params_in: ModelParams | None,
    ctx: TrainContext,
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
    workers: int = 1,
) -> tuple[ModelParams, list[dict]]:
    """Run one training stage and return the updated parameters and epoch log.

    The stage's group/split filter selects its utterances from ``manifest``.
    SIC starts from a seeded initialisation (and fixes the feature
    normalisation); SID and ENROLL continue from ``params_in``. Batches are
    visited in a seeded order and each batch gradient is the mean over its
    utterances, so a run is bit-reproducible.

    ``workers > 1`` splits each batch into contiguous chunks evaluated on a
    thread pool; the chunk gradients are summed in chunk order, so this mode is
    reproducible too, though not bit-identical to ``workers=1``.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    data = select(manifest, spec.group, spec.split)
    if not data:
        raise ValueError(f"stage {spec.stage}: dataset filter (group={spec.group}, split={spec.split}) is empty")
    if spec.init == "checkpoint":
        if params_in is None:
            raise MissingCheckpointError(f"stage {spec.stage} requires an input checkpoint")
        params = params_in.copy()
    else:
        params = init_params(ctx.model_config, spec.seed)
        params.cmvn_mean, params.cmvn_istd = compute_cmvn([ctx.clean_features(r) for r in data])

    opt = Adam(params, lr=spec.lr)
    order_rng = np.random.default_rng([spec.seed, 0x0DE7])
    history = []
    pool_cm = ThreadPoolExecutor(workers) if workers > 1 else nullcontext()
    with pool_cm as pool:
        for epoch in range(1, spec.epochs + 1):
            opt.lr = spec.epoch_lr(epoch)
            order = order_rng.permutation(len(data))
            sums = np.zeros(3)
            correct = 0
            for start in range(0, len(order), spec.batch_size):
                batch = order[start : start + spec.batch_size]
                recs = [data[idx] for idx in batch]
                feats = [ctx.train_features(r, np.random.default_rng([spec.seed, epoch, int(idx)])) for r, idx in zip(recs, batch)]
                labels = [r.label for r in recs]
                tokens = [ctx.tokens(r) for r in recs]
                if pool is None:
                    results = [backward_batch(params, feats, labels, tokens, ctx.ctc_weight, ctx.wws_weight)]
                else:
                    chunks = [c for c in np.array_split(np.arange(len(recs)), workers) if c.size]
                    results = list(pool.map(
                        lambda c: backward_batch(
                            params, [feats[i] for i in c], [labels[i] for i in c], [tokens[i] for i in c],
                            ctx.ctc_weight, ctx.wws_weight,
                        ),
                        chunks,
                    ))
                grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
                losses, posteriors = [], []
                for res in results:
                    for k, g in res.grads.items():
                        grads[k] += g
                    losses += res.losses
                    posteriors += res.posteriors
                for rec, loss, post in zip(recs, losses, posteriors):
                    sums += (loss.l_ctc, loss.l_wws, loss.l_total)
                    correct += predicted_label(post.kws_prob) == rec.label
                scale = 1.0 / len(batch)
                if spec.clip_norm is not None:
                    norm = scale * math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
                    if norm > spec.clip_norm:
                        scale *= spec.clip_norm / norm
                opt.step(params, {k: g * scale for k, g in grads.items()})
            n = len(data)
            entry = {
                "stage": spec.stage,
                "epoch": epoch,
                "l_ctc": float(sums[0] / n),
                "l_wws": float(sums[1] / n),
                "l_total": float(sums[2] / n),
                "accuracy": float(correct) / n,
            }
            history.append(entry)
            log.info("%s epoch %d: l_total %.4f acc %.3f", spec.stage, epoch, entry["l_total"], entry["accuracy"])
            if on_epoch:
                on_epoch(entry)
    if not params.is_finite():
        raise FloatingPointError(f"stage {spec.stage}: parameters diverged")

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in history:
                fh.write(json.dumps(entry) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return params, history

