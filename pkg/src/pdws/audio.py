"""WAV ingestion, log-Mel filterbank features and dynamic waveform augmentation."""

from __future__ import annotations

import math
import os
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import signal

PCM_SCALE = 32768.0
FEATURE_MAGIC = b"DWF1"


class AudioFormatError(ValueError):
    """Base class for unsupported WAV containers."""


class UnsupportedEncodingError(AudioFormatError):
    """The file is not 16-bit integer PCM."""


class ChannelCountError(AudioFormatError):
    """The file has more than one channel."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono samples (1-D array)")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    shift_ms: float = 10.0
    fft_size: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if not self.window_ms > self.shift_ms > 0:
            raise ValueError("need window_ms > shift_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.fft_size < self.window_samples:
            raise ValueError(f"fft_size {self.fft_size} < window of {self.window_samples} samples")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.shift_ms / 1000.0))


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    data: np.ndarray
    frame_shift_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AugPolicy:
    gain_range: tuple[float, float] = (0.9, 1.1)
    noise_prob: float = 0.15
    snr_db_range: tuple[float, float] = (8.0, 20.0)
    speed_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("gain_range", "snr_db_range", "speed_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: [{lo}, {hi}]")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")
        if self.gain_range[0] <= 0:
            raise ValueError("gain factors must be positive")
        if self.speed_range[0] < SPEED_BOUNDS[0] or self.speed_range[1] > SPEED_BOUNDS[1]:
            raise ValueError(f"speed_range must lie within {SPEED_BOUNDS}")


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def load_wav(path: str | os.PathLike) -> AudioBuffer:
    """Read a 16-bit mono PCM WAV file into an AudioBuffer scaled by 1/32768."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with wave.open(path, "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        # the stdlib reader rejects every non-PCM format tag
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated RIFF container") from exc
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: {8 * width}-bit PCM, expected 16-bit")
    if n_channels != 1:
        raise ChannelCountError(f"{path}: {n_channels} channels, expected mono")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, rate)


def save_wav(path: str | os.PathLike, audio: AudioBuffer) -> None:
    """Write a mono 16-bit PCM WAV; samples are rounded to the nearest PCM step."""
    pcm = np.clip(np.round(audio.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# log-Mel features
# --------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatConfig) -> np.ndarray:
    """Center frequency (Hz) of every triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FeatConfig) -> np.ndarray:
    """HTK-style triangular filters, shape (n_mels, fft_size // 2 + 1), unit peak.

    Cached per config; the returned array is read-only.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def num_frames(num_samples: int, cfg: FeatConfig) -> int:
    win, hop = cfg.window_samples, cfg.shift_samples
    if num_samples < win:
        return 0
    return 1 + (num_samples - win) // hop


def frame_signal(samples: np.ndarray, cfg: FeatConfig) -> np.ndarray:
    n = num_frames(samples.shape[0], cfg)
    if n == 0:
        return np.zeros((0, cfg.window_samples))
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_samples)
    return view[:: cfg.shift_samples][:n]


def log_mel(audio: AudioBuffer, cfg: FeatConfig | None = None) -> FeatureMatrix:
    """80-band log-Mel energies with a periodic Hann window and no pre-emphasis.

    Audio shorter than one window yields a matrix with zero frames.
    """
    cfg = cfg or FeatConfig()
    if audio.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"audio is {audio.sample_rate_hz} Hz but features expect {cfg.sample_rate_hz} Hz"
        )
    frames = frame_signal(audio.samples, cfg)
    if frames.shape[0] == 0:
        return FeatureMatrix(np.zeros((0, cfg.n_mels)), cfg.shift_ms)
    window = signal.get_window("hann", cfg.window_samples, fftbins=True)
    spectrum = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(cfg).T
    return FeatureMatrix(np.log(np.maximum(energies, cfg.log_floor)), cfg.shift_ms)


def write_features(path: str | os.PathLike, feats: FeatureMatrix) -> None:
    """Dump features as ``DWF1`` + u32 frames + u32 n_mels + row-major float32 LE."""
    data = np.ascontiguousarray(feats.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_features(path: str | os.PathLike, frame_shift_ms: float = 10.0) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad feature magic {blob[:4]!r}")
    frames, n_mels = struct.unpack("<II", blob[4:12])
    data = np.frombuffer(blob[12:], dtype="<f4")
    if data.size != frames * n_mels:
        raise ValueError(f"{path}: expected {frames * n_mels} floats, found {data.size}")
    return FeatureMatrix(data.reshape(frames, n_mels).astype(np.float64), frame_shift_ms)


# --------------------------------------------------------------------------
# augmentation primitives
# --------------------------------------------------------------------------

SPEED_BOUNDS = (0.5, 2.0)
RESAMPLE_MAX_DENOMINATOR = 200


def apply_gain(audio: AudioBuffer, factor: float) -> AudioBuffer:
    if not factor > 0:
        raise ValueError(f"gain factor must be positive, got {factor}")
    if factor == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    return AudioBuffer(np.clip(audio.samples * factor, -1.0, 1.0), audio.sample_rate_hz)


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or crop ``noise`` to exactly ``n`` samples."""
    if noise.shape[0] >= n:
        return noise[:n]
    reps = -(-n // noise.shape[0])
    return np.tile(noise, reps)[:n]


def noise_scale(signal_power: float, noise_power: float, snr_db: float) -> float:
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_noise(audio: AudioBuffer, noise: AudioBuffer, target_snr_db: float) -> AudioBuffer:
    """Add ``noise`` scaled so that the mixture has the requested SNR.

    The noise is looped or cropped to the signal length and powers are
    mean-squared amplitudes over that region. Output is clamped to [-1, 1].
    """
    if audio.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError(
            f"sample-rate mismatch: signal {audio.sample_rate_hz} Hz, noise {noise.sample_rate_hz} Hz"
        )
    if len(noise) == 0 or not np.any(noise.samples):
        raise ValueError("noise buffer is silent")
    n = len(audio)
    if n == 0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    region = fit_length(noise.samples, n)
    p_noise = float(np.mean(region**2))
    if p_noise == 0.0:
        raise ValueError("noise buffer is silent over the mixed region")
    p_signal = float(np.mean(audio.samples**2))
    g = noise_scale(p_signal, p_noise, target_snr_db)
    return AudioBuffer(np.clip(audio.samples + g * region, -1.0, 1.0), audio.sample_rate_hz)


def speed_perturb(audio: AudioBuffer, rate: float) -> AudioBuffer:
    """Band-limited resampling to ``round(len / rate)`` samples at the same sample rate.

    Playing the result back at the original rate scales every frequency by
    ``rate``. The polyphase ratio is the closest fraction with denominator
    <= 200, i.e. within about 1e-4 of the requested rate.
    """
    if not SPEED_BOUNDS[0] <= rate <= SPEED_BOUNDS[1]:
        raise ValueError(f"rate {rate} outside {SPEED_BOUNDS}")
    if rate == 1.0 or len(audio) == 0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    n_out = max(1, int(round(len(audio) / rate)))
    ratio = Fraction(1.0 / rate).limit_denominator(RESAMPLE_MAX_DENOMINATOR)
    out = signal.resample_poly(audio.samples, ratio.numerator, ratio.denominator)
    # the rational approximation can miss the target length by a sample or two
    out = out[:n_out] if out.shape[0] >= n_out else np.pad(out, (0, n_out - out.shape[0]))
    return AudioBuffer(np.clip(out, -1.0, 1.0), audio.sample_rate_hz)


@dataclass(frozen=True)
class AugDraw:
    gain: float
    noise_index: int | None
    snr_db: float | None
    rate: float


def draw_augmentation(policy: AugPolicy, rng: np.random.Generator, pool_size: int) -> AugDraw:
    """Sample augmentation parameters in the fixed order gain, noise, speed."""
    gain = float(rng.uniform(*policy.gain_range))
    noise_index = snr = None
    if rng.random() < policy.noise_prob:
        if pool_size == 0:
            raise ValueError("noise pool is empty but noise_prob > 0")
        noise_index = int(rng.integers(pool_size))
        snr = float(rng.uniform(*policy.snr_db_range))
    rate = float(rng.uniform(*policy.speed_range))
    return AugDraw(gain, noise_index, snr, rate)


def augment(
    audio: AudioBuffer,
    noise_pool: Sequence[AudioBuffer],
    policy: AugPolicy,
    rng: np.random.Generator | int | None = None,
) -> AudioBuffer:
    """Apply gain, optional noise mixing and speed perturbation, in that order.

    ``rng`` may be a Generator (consumed in place) or an integer seed; ``None``
    falls back to ``policy.seed``.
    """
    if policy.noise_prob > 0 and len(noise_pool) == 0:
        raise ValueError("noise pool is empty but noise_prob > 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(policy.seed if rng is None else rng)
    draw = draw_augmentation(policy, rng, len(noise_pool))
    out = apply_gain(audio, draw.gain)
    if draw.noise_index is not None:
        out = mix_noise(out, noise_pool[draw.noise_index], draw.snr_db)
    return speed_perturb(out, draw.rate)


def utterance_rng(corpus_seed: int, index: int) -> np.random.Generator:
    """Per-utterance generator, independent of processing order."""
    return np.random.default_rng([corpus_seed, index])
