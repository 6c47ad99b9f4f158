"""Command-line entry points (``pdws <command> ...``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .audio import AugPolicy, FeatConfig, augment, load_wav, log_mel, save_wav, utterance_rng, write_features
from .corpus import SynthSpec, gen_synth_corpus, read_manifest, select, write_manifest
from .decoding import load_vocab, prefix_beam_search, tokens_to_text
from .dual_filter import DEFAULT_RANK, WakeWordList, make_decision, read_decisions, run_dual_filter, write_decisions
from .evaluation import exhaustive_threshold_search, load_references, parse_rank_range, rank_sweep, score_decisions
from .model import ModelConfig, forward, load_checkpoint
from .pipeline import external_asr_source, run_pipeline, write_references, write_transcripts
from .training import StageSpec, TrainContext, train_stage


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> None:
    data = _read_json(args.spec) if args.spec else {}
    spec = SynthSpec.from_dict({**data, "seed": args.seed})
    records = gen_synth_corpus(spec, args.out_dir)
    print(f"wrote {len(records)} utterances to {args.out_dir}")


def cmd_featurize(args) -> None:
    cfg = FeatConfig(**_read_json(args.config)) if args.config else FeatConfig()
    root = Path(args.manifest).parent
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_manifest(args.manifest)
    for rec in records:
        write_features(out / f"{rec.utt_id}.dwf", log_mel(load_wav(root / rec.wav), cfg))
    print(f"wrote {len(records)} feature files to {out}")


def cmd_augment(args) -> None:
    policy = AugPolicy(**{**(_read_json(args.policy) if args.policy else {}), "seed": args.seed})
    root = Path(args.manifest).parent
    out = Path(args.out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    pool = [load_wav(p) for p in sorted(Path(args.noise_dir).glob("*.wav"))] if args.noise_dir else []
    records = read_manifest(args.manifest)
    augmented = []
    for idx, rec in enumerate(records):
        wav = f"wav/{rec.utt_id}.wav"
        save_wav(out / wav, augment(load_wav(root / rec.wav), pool, policy, utterance_rng(args.seed, idx)))
        augmented.append(replace(rec, wav=wav))
    write_manifest(out / "manifest.jsonl", augmented)
    print(f"wrote {len(augmented)} augmented utterances to {out}")


def cmd_train(args) -> None:
    root = Path(args.manifest).parent
    records = read_manifest(args.manifest)
    vocab = load_vocab(args.vocab or root / "vocab.txt")
    wake_words = WakeWordList.load(args.wake_words or root / "wake_words.txt")
    params_in = load_checkpoint(args.init) if args.init else None
    if params_in is not None:
        model_cfg = params_in.config
    else:
        model_cfg = ModelConfig(
            n_keywords=len(wake_words), vocab_size=len(vocab),
            tcn_layers=args.tcn_layers, hidden_dim=args.hidden_dim, kernel_size=args.kernel_size,
        )
    noise_dir = Path(args.noise_dir) if args.noise_dir else root / "noise"
    ctx = TrainContext(
        root, vocab, model_cfg,
        aug_policy=None if args.no_augment else AugPolicy(seed=args.seed),
        noise_pool=[load_wav(p) for p in sorted(noise_dir.glob("*.wav"))] if noise_dir.is_dir() else [],
        ctc_weight=args.ctc_weight, wws_weight=args.wws_weight,
    )
    spec = StageSpec.for_stage(
        args.stage, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed, lr_schedule=args.lr_schedule
    )
    log_path = args.log or f"{args.out}.log.jsonl"
    _, history = train_stage(spec, records, params_in, ctx, args.out, log_path, workers=args.workers)
    last = history[-1] if history else {}
    print(f"{args.stage}: {len(history)} epochs, final {json.dumps(last)}; checkpoint {args.out}")


def cmd_infer(args) -> None:
    params = load_checkpoint(args.checkpoint)
    root = Path(args.manifest).parent
    out = Path(args.out_dir)
    post_dir = out / "posteriors"
    post_dir.mkdir(parents=True, exist_ok=True)
    records = select(read_manifest(args.manifest), split=args.split)
    decisions = []
    for rec in records:
        post = forward(params, log_mel(load_wav(root / rec.wav)).data)
        np.savez(post_dir / f"{rec.utt_id}.npz", kws_prob=post.kws_prob, asr_logprob=post.asr_logprob)
        decisions.append(make_decision(rec.utt_id, post.kws_prob))
    write_decisions(out / "decisions.jsonl", decisions)
    write_references(out / "refs.jsonl", {r.utt_id: r.label for r in records})
    print(f"scored {len(records)} utterances into {out}")


def cmd_decode(args) -> None:
    vocab = load_vocab(args.vocab)
    texts, logprobs = {}, {}
    for path in sorted(Path(args.posteriors).glob("*.npz")):
        with np.load(path) as data:
            best = prefix_beam_search(data["asr_logprob"], args.width)[0]
        texts[path.stem] = tokens_to_text(best.tokens, vocab)
        logprobs[path.stem] = best.logprob
    write_transcripts(args.out, texts, logprobs)
    print(f"decoded {len(texts)} utterances to {args.out}")


def cmd_filter(args) -> None:
    decisions = read_decisions(args.decisions)
    asr1 = external_asr_source(args.asr1)
    asr2 = external_asr_source(args.asr2) if args.asr2 else {}
    final = run_dual_filter(decisions, asr1, asr2, WakeWordList.load(args.wake_words), args.rank)
    write_decisions(args.out, final)
    kept = sum(d.final_label != -1 for d in final)
    print(f"{kept} of {len(final)} decisions keep a keyword")


def cmd_score(args) -> None:
    decisions = read_decisions(args.decisions)
    refs = load_references(args.refs)
    report = {"decisions": score_decisions(decisions, refs).to_json()}
    if args.sweep_ranks:
        report["rank_sweep"] = [{"rank": r, **rep.to_json()} for r, rep in rank_sweep(decisions, refs, parse_rank_range(args.sweep_ranks))]
    if args.exhaustive:
        theta, best = exhaustive_threshold_search(decisions, refs)
        report["exhaustive"] = {"threshold": round(theta, 6), **best.to_json()}
    _write_json(args.out, report)
    print(json.dumps(report["decisions"]))


def cmd_pipeline(args) -> None:
    report = run_pipeline(args.config, args.out_dir)
    metrics = report.get("metrics")
    if metrics:
        print(json.dumps({k: metrics[k]["score"] for k in ("no_filter", "threshold_filter", "asr_filter", "exhaustive")}))
    print(f"report: {Path(args.out_dir) / 'report.json'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdws", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write log-Mel feature dumps for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file with FeatConfig fields")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("augment", help="write one augmented copy of every utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-dir")
    p.add_argument("--policy", help="JSON file with AugPolicy fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["sic", "sid", "enroll"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", help="input checkpoint (required for sid and enroll)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], default="cosine")
    p.add_argument("--ctc-weight", type=float, default=0.5)
    p.add_argument("--wws-weight", type=float, default=1.0)
    p.add_argument("--tcn-layers", type=int, default=ModelConfig.tcn_layers)
    p.add_argument("--hidden-dim", type=int, default=ModelConfig.hidden_dim)
    p.add_argument("--kernel-size", type=int, default=ModelConfig.kernel_size)
    p.add_argument("--vocab")
    p.add_argument("--wake-words")
    p.add_argument("--noise-dir")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--workers", type=int, default=1, help="threads per batch (1 = deterministic serial mode)")
    p.add_argument("--log", help="training log path (default: OUT.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="posteriors and temporal decisions for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decode", help="prefix beam search over stored posteriors")
    p.add_argument("--posteriors", required=True, help="directory of .npz posterior files")
    p.add_argument("--vocab", required=True)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("filter", help="rank threshold plus transcript-length filter")
    p.add_argument("--decisions", required=True)
    p.add_argument("--asr1", required=True)
    p.add_argument("--asr2")
    p.add_argument("--wake-words", required=True)
    p.add_argument("--rank", type=int, default=DEFAULT_RANK)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("score", help="FAR / FRR / Score of a decisions file")
    p.add_argument("--decisions", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--sweep-ranks", help='e.g. "55..61"')
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="corpus, three training stages, decoding, filtering, scoring")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"pdws {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
