"""End-to-end orchestration: corpus, three training stages, inference,
decoding, dual filtering and scoring."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict
from importlib import resources
from pathlib import Path
from typing import Mapping

import jsonschema
import numpy as np
import scipy

from . import __version__
from .audio import AugPolicy, FeatConfig, load_wav
from .corpus import SynthSpec, check_labels, corpus_stats, gen_synth_corpus, read_manifest, select
from .decoding import DEFAULT_BEAM_WIDTH, load_vocab, prefix_beam_search, tokens_to_text
from .dual_filter import DEFAULT_RANK, Decision, WakeWordList, make_decision, run_dual_filter, threshold_filter, write_decisions
from .evaluation import exhaustive_threshold_search, rank_sweep, score_decisions
from .model import ModelConfig, forward, load_checkpoint
from .training import StageSpec, TrainContext, train_stage

log = logging.getLogger(__name__)

DEFAULT_STAGES = [
    {"stage": "sic", "epochs": 30, "lr": 3e-3, "batch_size": 8, "lr_schedule": "cosine"},
    {"stage": "sid", "epochs": 10, "lr": 1e-3, "batch_size": 8, "lr_schedule": "cosine"},
    {"stage": "enroll", "epochs": 10, "lr": 1e-3, "batch_size": 8, "lr_schedule": "cosine"},
]


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def config_schema() -> dict:
    return json.loads(resources.files("pdws").joinpath("config_schema.json").read_text(encoding="utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return sha256_hex(Path(path).read_bytes())


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh), path.parent


def resolve_config(config: Mapping) -> dict:
    """Validate against the schema and fill in defaults."""
    cfg = copy.deepcopy(dict(config))
    jsonschema.validate(cfg, config_schema())
    cfg.setdefault("name", "pipeline")
    cfg.setdefault("features", {})
    cfg.setdefault("augment", {})
    cfg.setdefault("model", {})
    cfg["loss"] = {"ctc_weight": 0.5, "wws_weight": 1.0, **cfg.get("loss", {})}
    cfg.setdefault("stages", copy.deepcopy(DEFAULT_STAGES))
    cfg["decode"] = {"beam_width": DEFAULT_BEAM_WIDTH, **cfg.get("decode", {})}
    cfg["filter"] = {"rank": DEFAULT_RANK, "asr2": None, **cfg.get("filter", {})}
    cfg["eval"] = {"sweep_ranks": list(range(55, 62)), **cfg.get("eval", {})}
    return cfg


def external_asr_source(path) -> dict[str, str]:
    """Load transcripts of an external recogniser (JSON lines with "id" and "text")."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                utt_id, text = str(rec["id"]), str(rec["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed transcript line") from exc
            if utt_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {utt_id!r}")
            out[utt_id] = text
    return out


def write_transcripts(path, transcripts: Mapping[str, str], logprobs: Mapping[str, float] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, text in transcripts.items():
            rec = {"id": utt_id, "text": text}
            if logprobs is not None:
                rec["logprob"] = logprobs[utt_id]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_references(path, refs: Mapping[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, label in refs.items():
            fh.write(json.dumps({"id": utt_id, "label": label}) + "\n")


def _prepare_corpus(cfg: dict, out_dir: Path, base_dir: Path) -> Path:
    corpus = cfg["corpus"]
    if "synth" in corpus:
        spec = SynthSpec.from_dict({"seed": cfg["seed"], **corpus["synth"]})
        key = sha256_hex(canonical_json(spec.to_dict()))[:12]
        root = out_dir / f"corpus-{key}"
        if not (root / "manifest.jsonl").exists():
            gen_synth_corpus(spec, root)
        return root
    root = Path(corpus["dir"])
    return root if root.is_absolute() else base_dir / root


def _stage_key(parts: dict) -> str:
    return sha256_hex(canonical_json(parts))[:16]


def run_pipeline(config, out_dir, base_dir=None) -> dict:
    """Run every configured stage and write ``report.json`` under ``out_dir``.

    ``config`` is a mapping or a path to a JSON document. Completed training
    stages are content-addressed by their inputs, so re-running a finished
    configuration skips the training work.
    """
    if isinstance(config, (str, os.PathLike)):
        config, cfg_dir = load_config(config)
        base_dir = base_dir or cfg_dir
    base_dir = Path(base_dir or ".")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        cfg = resolve_config(config)
    except jsonschema.ValidationError as exc:
        raise PipelineError("config", exc) from exc
    seed = cfg["seed"]

    try:
        root = _prepare_corpus(cfg, out_dir, base_dir)
        corpus = cfg["corpus"]
        manifest_path = root / corpus.get("manifest", "manifest.jsonl")
        records = read_manifest(manifest_path)
        wake_words = WakeWordList.load(root / corpus.get("wake_words", "wake_words.txt"))
        vocab = load_vocab(root / corpus.get("vocab", "vocab.txt"))
        check_labels(records, wake_words.words)
        noise_dir = root / corpus.get("noise_dir", "noise")
        noise_pool = [load_wav(p) for p in sorted(noise_dir.glob("*.wav"))] if noise_dir.is_dir() else []
    except Exception as exc:
        raise PipelineError("corpus", exc) from exc

    report: dict = {
        "name": cfg["name"],
        "provenance": {
            "config_hash": sha256_hex(canonical_json(cfg)),
            "manifest_sha256": file_digest(manifest_path),
            "seeds": {"pipeline": seed, "augment": None if cfg["augment"] is None else cfg["augment"].get("seed", seed)},
            "versions": {"pdws": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        },
        "corpus": corpus_stats(records),
    }
    if not cfg["stages"]:
        _write_report(out_dir, report)
        return report

    feat_cfg = FeatConfig(**cfg["features"])
    aug = None if cfg["augment"] is None else AugPolicy(**{"seed": seed, **cfg["augment"]})
    model_cfg = ModelConfig(
        n_mels=feat_cfg.n_mels, n_keywords=len(wake_words), vocab_size=len(vocab), **cfg["model"]
    )
    ctx = TrainContext(
        root, vocab, model_cfg, feat_cfg, aug, noise_pool, cfg["loss"]["ctc_weight"], cfg["loss"]["wws_weight"]
    )

    params = None
    prev_digest = None
    training = []
    for i, stage_cfg in enumerate(cfg["stages"]):
        name = stage_cfg["stage"]
        try:
            spec = StageSpec.for_stage(**{**stage_cfg, "seed": seed})
            key = _stage_key({
                "stage": asdict(spec),
                "model": asdict(model_cfg),
                "features": asdict(feat_cfg),
                "augment": None if aug is None else asdict(aug),
                "loss": cfg["loss"],
                "manifest": report["provenance"]["manifest_sha256"],
                "init": prev_digest,
            })
            stage_dir = out_dir / "stages" / f"{i}-{name}-{key}"
            ckpt, log_path = stage_dir / "checkpoint.bin", stage_dir / "train_log.jsonl"
            if ckpt.exists() and log_path.exists():
                log.info("stage %s: cached at %s", name, stage_dir)
            else:
                stage_dir.mkdir(parents=True, exist_ok=True)
                train_stage(spec, records, params, ctx, checkpoint_path=ckpt, log_path=log_path)
            params = load_checkpoint(ckpt)
            prev_digest = file_digest(ckpt)
            with open(log_path, encoding="utf-8") as fh:
                history = [json.loads(line) for line in fh if line.strip()]
            training.append({"stage": name, "key": key, "checkpoint_sha256": prev_digest, "log": history})
        except Exception as exc:
            raise PipelineError(name, exc) from exc
    report["training"] = training

    try:
        evaluation = _evaluate(cfg, records, params, ctx, wake_words, vocab, out_dir, base_dir)
    except Exception as exc:
        raise PipelineError("evaluate", exc) from exc
    report["metrics"] = evaluation
    _write_report(out_dir, report)
    return report


def _evaluate(cfg, records, params, ctx, wake_words, vocab, out_dir: Path, base_dir: Path) -> dict:
    eval_set = select(records, split="eval")
    if not eval_set:
        raise ValueError("no eval-split utterances in the manifest")
    refs = {r.utt_id: r.label for r in eval_set}
    post_dir = out_dir / "posteriors"
    post_dir.mkdir(exist_ok=True)

    decisions: list[Decision] = []
    asr1: dict[str, str] = {}
    asr1_logprob: dict[str, float] = {}
    for rec in eval_set:
        post = forward(params, ctx.clean_features(rec))
        np.savez(post_dir / f"{rec.utt_id}.npz", kws_prob=post.kws_prob, asr_logprob=post.asr_logprob)
        decisions.append(make_decision(rec.utt_id, post.kws_prob))
        best = prefix_beam_search(post.asr_logprob, cfg["decode"]["beam_width"])[0]
        asr1[rec.utt_id] = tokens_to_text(best.tokens, vocab)
        asr1_logprob[rec.utt_id] = best.logprob

    asr2_path = cfg["filter"]["asr2"]
    if asr2_path:
        asr2_path = Path(asr2_path) if Path(asr2_path).is_absolute() else base_dir / asr2_path
        asr2 = external_asr_source(asr2_path)
    else:
        asr2 = {}

    rank = cfg["filter"]["rank"]
    thresholded = threshold_filter(decisions, rank)
    final = run_dual_filter(decisions, asr1, asr2, wake_words, rank)
    write_decisions(out_dir / "decisions_temporal.jsonl", decisions)
    write_decisions(out_dir / "decisions_threshold.jsonl", thresholded)
    write_decisions(out_dir / "decisions_final.jsonl", final)
    write_transcripts(out_dir / "asr1.jsonl", asr1, asr1_logprob)
    write_references(out_dir / "refs.jsonl", refs)

    theta, best = exhaustive_threshold_search(decisions, refs)
    asr_exact = sum(asr1[r.utt_id] == r.text for r in eval_set) / len(eval_set)
    return {
        "rank": rank,
        "no_filter": score_decisions(decisions, refs).to_json(),
        "threshold_filter": score_decisions(thresholded, refs).to_json(),
        "asr_filter": score_decisions(final, refs).to_json(),
        "exhaustive": {"threshold": round(theta, 6), **best.to_json()},
        "rank_sweep": [{"rank": r, **rep.to_json()} for r, rep in rank_sweep(decisions, refs, cfg["eval"]["sweep_ranks"])],
        "asr_branch_exact_match": round(asr_exact, 6),
        "external_asr_transcripts": len(asr2),
    }


def _write_report(out_dir: Path, report: dict) -> None:
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
