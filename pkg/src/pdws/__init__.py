"""Dysarthric wake-word spotting at desk scale: log-Mel features, a two-branch
(keyword + CTC) DS-TCN, CTC decoding, a dual post-filter and FAR/FRR scoring."""

__version__ = "0.1.0"

from .audio import AudioBuffer, AugPolicy, FeatConfig, FeatureMatrix, augment, load_wav, log_mel, save_wav
from .decoding import greedy_decode, prefix_beam_search
from .dual_filter import FILLER, Decision, WakeWordList, asr_filter, run_dual_filter, threshold_filter
from .evaluation import EvalReport, exhaustive_threshold_search, rank_sweep, score_decisions
from .losses import combined_loss, ctc_loss, max_pooling_loss
from .model import ModelConfig, ModelParams, backward, forward, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "AudioBuffer", "AugPolicy", "FeatConfig", "FeatureMatrix", "augment", "load_wav", "log_mel", "save_wav",
    "greedy_decode", "prefix_beam_search",
    "FILLER", "Decision", "WakeWordList", "asr_filter", "run_dual_filter", "threshold_filter",
    "EvalReport", "exhaustive_threshold_search", "rank_sweep", "score_decisions",
    "combined_loss", "ctc_loss", "max_pooling_loss",
    "ModelConfig", "ModelParams", "backward", "forward", "init_params", "load_checkpoint", "save_checkpoint",
]
