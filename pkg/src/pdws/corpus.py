"""Utterance manifests and a deterministic synthetic wake-word corpus.

Every character of the toy alphabet is rendered as a two-tone chord (a DTMF
style grid), so a transcript maps to a tone sequence. Keyword and filler
classes are distinct strings; "dysarthric" renditions stretch segments
irregularly, jitter the tone frequencies and destabilise the amplitude.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import AudioBuffer, save_wav
from .losses import FILLER

GROUPS = ("control", "dysarthric")
SPLITS = ("train", "enroll", "eval")
SPECIAL_TOKENS = ("<blank>", "<unk>", "<sos/eos>")
ALPHABET = "abcdefghijklmnopqrst"
LOW_TONES_HZ = (300.0, 420.0, 560.0, 720.0, 900.0)
HIGH_TONES_HZ = (1200.0, 1600.0, 2100.0, 2700.0)


@dataclass(frozen=True)
class UttRecord:
    utt_id: str
    wav: str
    text: str
    label: int
    speaker: str
    group: str
    split: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"{self.utt_id}: unknown group {self.group!r}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.utt_id}: unknown split {self.split!r}")
        if self.label < FILLER:
            raise ValueError(f"{self.utt_id}: bad label {self.label}")

    @property
    def is_wake(self) -> bool:
        return self.label != FILLER


def write_manifest(path, records: Iterable[UttRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")


def read_manifest(path) -> list[UttRecord]:
    names = {f.name for f in fields(UttRecord)}
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if set(rec) != names:
                raise ValueError(f"{path}:{lineno}: fields {sorted(rec)} != {sorted(names)}")
            rec["label"] = int(rec["label"])
            item = UttRecord(**rec)
            if item.utt_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utt_id {item.utt_id!r}")
            seen.add(item.utt_id)
            out.append(item)
    return out


def check_labels(records: Sequence[UttRecord], wake_words: Sequence[str]) -> None:
    """Keyword labels must point at their wake word; fillers must not say one."""
    wake = set(wake_words)
    for rec in records:
        if rec.is_wake:
            if rec.label >= len(wake_words) or wake_words[rec.label] != rec.text:
                raise ValueError(f"{rec.utt_id}: label {rec.label} inconsistent with text {rec.text!r}")
        elif rec.text in wake:
            raise ValueError(f"{rec.utt_id}: filler utterance says wake word {rec.text!r}")


def select(records: Iterable[UttRecord], group: str | None = None, split: str | None = None) -> list[UttRecord]:
    return [r for r in records if (group is None or r.group == group) and (split is None or r.split == split)]


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Distortion:
    time_warp: float = 0.0
    formant_jitter: float = 0.0
    amplitude_instability: float = 0.0

    def __post_init__(self):
        if self.time_warp < 0 or self.formant_jitter < 0 or not 0 <= self.amplitude_instability < 1:
            raise ValueError("distortion magnitudes must be non-negative (amplitude < 1)")
        if self.time_warp >= 1:
            raise ValueError("time_warp must be < 1")


@dataclass(frozen=True)
class SynthSpec:
    n_keywords: int = 10
    n_filler_classes: int = 20
    n_confusers: int = 4
    control_speakers: int = 4
    dysarthric_speakers: int = 4
    target_speakers: int = 2
    wake_reps: int = 5
    filler_reps: int = 7
    enroll_reps: int = 2
    control: Distortion = field(default_factory=lambda: Distortion(0.1, 0.01, 0.1))
    dysarthric: Distortion = field(default_factory=lambda: Distortion(0.35, 0.03, 0.4))
    char_ms: float = 110.0
    gap_ms: float = 25.0
    lead_ms: tuple[float, float] = (80.0, 250.0)
    tail_ms: float = 200.0
    noise_floor_db: float = -50.0
    sample_rate_hz: int = 16000
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_keywords, self.n_filler_classes, self.control_speakers,
                  self.dysarthric_speakers, self.wake_reps, self.filler_reps)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if not 0 <= self.target_speakers <= self.dysarthric_speakers:
            raise ValueError("target_speakers must be within [0, dysarthric_speakers]")
        if not 0 <= self.n_confusers <= self.n_filler_classes:
            raise ValueError("n_confusers must be within [0, n_filler_classes]")
        if self.enroll_reps >= min(self.wake_reps, self.filler_reps) and self.target_speakers:
            raise ValueError("enroll_reps must leave at least one rep for evaluation")
        if self.lead_ms[0] > self.lead_ms[1]:
            raise ValueError("lead_ms range is empty")
        for name in ("control", "dysarthric"):
            value = getattr(self, name)
            if isinstance(value, dict):
                object.__setattr__(self, name, Distortion(**value))
        object.__setattr__(self, "lead_ms", tuple(float(x) for x in self.lead_ms))

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_speakers(self) -> int:
        return self.control_speakers + self.dysarthric_speakers


def vocabulary() -> list[str]:
    return list(SPECIAL_TOKENS) + list(ALPHABET)


def char_tones(ch: str) -> tuple[float, float]:
    i = ALPHABET.index(ch)
    return LOW_TONES_HZ[i % len(LOW_TONES_HZ)], HIGH_TONES_HZ[i // len(LOW_TONES_HZ)]


def class_texts(spec: SynthSpec) -> tuple[list[str], list[str]]:
    """Wake-word strings (lengths cycling 2..5) and distinct filler strings."""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    letters = np.array(list(ALPHABET))
    taken: set[str] = set()

    def fresh(length: int) -> str:
        for _ in range(10_000):
            text = "".join(rng.choice(letters, size=length))
            # no immediate repeats keeps every class alignable in few frames
            if text not in taken and all(a != b for a, b in zip(text, text[1:])):
                taken.add(text)
                return text
        raise RuntimeError("could not draw a fresh class string")

    keywords = [fresh(2 + i % 4) for i in range(spec.n_keywords)]
    fillers = []
    for j in range(spec.n_filler_classes):
        if j < spec.n_confusers:
            base = keywords[j % len(keywords)]
            # one extra character in front of a keyword; a trailing extra
            # character would be invisible to a causal detector at the
            # keyword's last frame
            for _ in range(10_000):
                text = str(rng.choice(letters)) + base
                if text not in taken and text[0] != text[1]:
                    taken.add(text)
                    break
            fillers.append(text)
        else:
            fillers.append(fresh(int(rng.integers(1, 7))))
    return keywords, fillers


def render(text: str, spec: SynthSpec, distortion: Distortion, rng: np.random.Generator, floor_rng: np.random.Generator) -> np.ndarray:
    """Tone-sequence waveform for ``text``.

    ``rng`` drives the distortion draws; ``floor_rng`` drives the lead-in and
    the background floor so a zero distortion reproduces the same waveform.
    """
    sr = spec.sample_rate_hz
    lead = floor_rng.uniform(*spec.lead_ms) / 1000.0
    pieces = [np.zeros(int(round(lead * sr)))]
    for ch in text:
        stretch = 1.0 + rng.uniform(-0.5 * distortion.time_warp, distortion.time_warp)
        dur = spec.char_ms / 1000.0 * stretch
        n = int(round(dur * sr))
        t = np.arange(n) / sr
        jitter = 1.0 + rng.uniform(-distortion.formant_jitter, distortion.formant_jitter, size=2)
        lo, hi = char_tones(ch)
        seg = np.sin(2 * np.pi * lo * jitter[0] * t) + 0.7 * np.sin(2 * np.pi * hi * jitter[1] * t)
        level = 1.0 - rng.uniform(0.0, distortion.amplitude_instability)
        tremolo_hz = rng.uniform(3.0, 8.0)
        depth = 0.5 * distortion.amplitude_instability
        envelope = level * (1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * tremolo_hz * t)))
        ramp = min(n // 2, int(0.01 * sr))
        if ramp:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            envelope[:ramp] *= fade
            envelope[-ramp:] *= fade[::-1]
        pieces.append(0.25 * seg * envelope)
        gap = spec.gap_ms / 1000.0 * (1.0 + rng.uniform(-0.5 * distortion.time_warp, distortion.time_warp))
        pieces.append(np.zeros(int(round(gap * sr))))
    pieces.append(np.zeros(int(round(spec.tail_ms / 1000.0 * sr))))
    wave = np.concatenate(pieces)
    floor = 10.0 ** (spec.noise_floor_db / 20.0)
    wave = wave + floor * floor_rng.standard_normal(wave.shape[0])
    return np.clip(wave, -1.0, 1.0)


def noise_pool_waves(spec: SynthSpec, seconds: float = 2.0) -> dict[str, np.ndarray]:
    """Background noises for augmentation: white, pink, brown and hum."""
    rng = np.random.default_rng([spec.seed, 0x401BE])
    sr = spec.sample_rate_hz
    n = int(seconds * sr)
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    freqs[0] = freqs[1]
    pink = np.fft.irfft(spectrum / np.sqrt(freqs), n)
    brown = np.fft.irfft(spectrum / freqs, n)
    t = np.arange(n) / sr
    hum = sum(np.sin(2 * np.pi * 50.0 * h * t) / h for h in range(1, 6)) + 0.3 * rng.standard_normal(n)
    out = {}
    for name, x in (("white", white), ("pink", pink), ("brown", brown), ("hum", hum)):
        out[name] = 0.3 * x / np.max(np.abs(x))
    return out


def _split_for(group: str, speaker_idx: int, rep: int, spec: SynthSpec) -> str:
    if group == "control":
        return "train"
    if speaker_idx < spec.dysarthric_speakers - spec.target_speakers:
        return "train"
    return "enroll" if rep < spec.enroll_reps else "eval"


def gen_synth_corpus(spec: SynthSpec, out_dir) -> list[UttRecord]:
    """Render the corpus under ``out_dir`` and return its manifest.

    Writes ``wav/*.wav``, ``noise/*.wav``, ``manifest.jsonl``, ``wake_words.txt``,
    ``vocab.txt`` and ``spec.json``. Output is byte-identical for equal specs.
    """
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
        (out / "noise").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"corpus directory {out} is not writable")

    keywords, fillers = class_texts(spec)
    classes = [(k, text, spec.wake_reps) for k, text in enumerate(keywords)]
    classes += [(FILLER, text, spec.filler_reps) for text in fillers]
    records = []
    for g_idx, group in enumerate(GROUPS):
        n_spk = spec.control_speakers if group == "control" else spec.dysarthric_speakers
        distortion = spec.control if group == "control" else spec.dysarthric
        for s in range(n_spk):
            speaker = f"{group[0].upper()}{s:02d}"
            for c_idx, (label, text, reps) in enumerate(classes):
                for rep in range(reps):
                    rng = np.random.default_rng([spec.seed, g_idx, s, c_idx, rep])
                    floor_rng = np.random.default_rng([spec.seed, 99, s, c_idx, rep])
                    wave = render(text, spec, distortion, rng, floor_rng)
                    kind = f"kw{label:02d}" if label != FILLER else f"fl{c_idx - spec.n_keywords:02d}"
                    utt_id = f"{speaker}_{kind}_r{rep}"
                    rel = f"wav/{utt_id}.wav"
                    save_wav(out / rel, AudioBuffer(wave, spec.sample_rate_hz))
                    records.append(UttRecord(utt_id, rel, text, label, speaker, group, _split_for(group, s, rep, spec)))

    for name, wave in noise_pool_waves(spec).items():
        save_wav(out / "noise" / f"{name}.wav", AudioBuffer(wave, spec.sample_rate_hz))
    write_manifest(out / "manifest.jsonl", records)
    (out / "wake_words.txt").write_text("".join(w + "\n" for w in keywords), encoding="utf-8")
    (out / "vocab.txt").write_text("".join(v + "\n" for v in vocabulary()), encoding="utf-8")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return records


def corpus_stats(records: Sequence[UttRecord]) -> dict:
    stats: dict = {"n_utterances": len(records), "by_split": {}, "by_group": {}}
    for split in SPLITS:
        sub = [r for r in records if r.split == split]
        stats["by_split"][split] = {"wake": sum(r.is_wake for r in sub), "non_wake": sum(not r.is_wake for r in sub)}
    for group in GROUPS:
        sub = [r for r in records if r.group == group]
        stats["by_group"][group] = {"utterances": len(sub), "speakers": len({r.speaker for r in sub})}
    return stats
