import math
import wave

import numpy as np
import pytest

from pdws.audio import (
    AudioBuffer,
    AugPolicy,
    ChannelCountError,
    FeatConfig,
    UnsupportedEncodingError,
    apply_gain,
    augment,
    draw_augmentation,
    load_wav,
    log_mel,
    mel_center_frequencies,
    mix_noise,
    num_frames,
    read_features,
    save_wav,
    speed_perturb,
    utterance_rng,
    write_features,
)


def _write_raw_wav(path, frames: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


# ---------------------------------------------------------------- WAV I/O


def test_silence_file_loads_as_zeros(tmp_path):
    _write_raw_wav(tmp_path / "s.wav", b"\x00\x00" * 16000)
    audio = load_wav(tmp_path / "s.wav")
    assert audio.sample_rate_hz == 16000
    assert len(audio) == 16000
    assert not np.any(audio.samples)


def test_max_positive_sample_scaling(tmp_path):
    _write_raw_wav(tmp_path / "m.wav", np.array([32767], dtype="<i2").tobytes())
    audio = load_wav(tmp_path / "m.wav")
    assert audio.samples.tolist() == [32767 / 32768]


def test_wav_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    pcm = rng.integers(-32768, 32768, size=4001)
    original = AudioBuffer(pcm / 32768.0, 16000)
    save_wav(tmp_path / "r.wav", original)
    loaded = load_wav(tmp_path / "r.wav")
    assert np.array_equal(loaded.samples, original.samples)


def test_wav_errors_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "missing.wav")
    _write_raw_wav(tmp_path / "stereo.wav", b"\x00\x00" * 20, channels=2)
    with pytest.raises(ChannelCountError):
        load_wav(tmp_path / "stereo.wav")
    _write_raw_wav(tmp_path / "u8.wav", b"\x80" * 20, width=1)
    with pytest.raises(UnsupportedEncodingError):
        load_wav(tmp_path / "u8.wav")


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(4), 0)
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))


# ---------------------------------------------------------------- features


def test_one_second_frame_count():
    assert log_mel(AudioBuffer(np.zeros(16000))).num_frames == 98


@pytest.mark.parametrize("n", [0, 1, 399])
def test_short_input_gives_zero_frames(n):
    assert log_mel(AudioBuffer(np.zeros(n))).data.shape == (0, 80)


def test_frame_count_formula_random_lengths():
    rng = np.random.default_rng(0)
    cfg = FeatConfig()
    for n in rng.integers(0, 6000, size=1000):
        expected = 1 + (n - 400) // 160 if n >= 400 else 0
        assert num_frames(int(n), cfg) == expected
    for n in rng.integers(0, 3000, size=25):
        assert log_mel(AudioBuffer(np.zeros(n)), cfg).num_frames == (1 + (n - 400) // 160 if n >= 400 else 0)


def test_zero_audio_hits_log_floor():
    feats = log_mel(AudioBuffer(np.zeros(2000)))
    assert np.all(feats.data == math.log(1e-10))


def _oracle_log_mel(x, cfg):
    """Direct DFT of each Hann-windowed frame, then HTK triangles coded from scratch."""
    win, hop, nfft = 400, 160, cfg.fft_size
    n = np.arange(win)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / win)  # periodic
    k = np.arange(nfft // 2 + 1)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / nfft)
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    pts = inv(np.linspace(mel(0.0), mel(8000.0), cfg.n_mels + 2))
    freqs = k * 16000 / nfft
    fb = np.zeros((cfg.n_mels, k.size))
    for m in range(cfg.n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        for j, f in enumerate(freqs):
            if lo < f <= c:
                fb[m, j] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, j] = (hi - f) / (hi - c)
    out = []
    for start in range(0, len(x) - win + 1, hop):
        power = np.abs(dft @ (x[start : start + win] * hann)) ** 2
        out.append(np.log(np.maximum(fb @ power, 1e-10)))
    return np.array(out), pts[1:-1]


def test_sine_matches_direct_dft_oracle():
    cfg = FeatConfig()
    t = np.arange(4000) / 16000
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    ours = log_mel(AudioBuffer(x), cfg).data
    oracle, centers = _oracle_log_mel(x, cfg)
    np.testing.assert_allclose(centers, mel_center_frequencies(cfg), rtol=1e-12)
    np.testing.assert_allclose(ours, oracle, atol=1e-8)
    nearest = int(np.argmin(np.abs(centers - 1000.0)))
    assert np.all(np.argmax(ours, axis=1) == nearest)


def test_whole_frame_shift_covariance():
    rng = np.random.default_rng(1)
    # leading silence longer than window - shift, so the prepended frame is all zeros
    x = np.concatenate([np.zeros(240), rng.uniform(-0.5, 0.5, 3000)])
    base = log_mel(AudioBuffer(x)).data
    shifted = log_mel(AudioBuffer(np.concatenate([np.zeros(160), x]))).data
    assert shifted.shape[0] == base.shape[0] + 1
    np.testing.assert_allclose(shifted[1:], base, atol=1e-9)
    assert np.all(shifted[0] == math.log(1e-10))


def test_feature_dump_round_trip(tmp_path):
    feats = log_mel(AudioBuffer(np.random.default_rng(2).uniform(-1, 1, 1600)))
    write_features(tmp_path / "f.dwf", feats)
    blob = (tmp_path / "f.dwf").read_bytes()
    assert blob[:4] == b"DWF1"
    assert int.from_bytes(blob[4:8], "little") == feats.num_frames
    assert int.from_bytes(blob[8:12], "little") == 80
    back = read_features(tmp_path / "f.dwf")
    np.testing.assert_array_equal(back.data, feats.data.astype(np.float32))


def test_feat_config_validation():
    with pytest.raises(ValueError):
        FeatConfig(window_ms=10, shift_ms=10)
    with pytest.raises(ValueError):
        FeatConfig(fft_size=256)
    with pytest.raises(ValueError):
        FeatConfig(fmax_hz=9000)


# ---------------------------------------------------------------- gain / noise / speed


def test_gain_examples():
    x = AudioBuffer(np.array([1.0, -0.5, 0.95]))
    assert np.array_equal(apply_gain(x, 1.0).samples, x.samples)
    assert apply_gain(x, 0.9).samples[0] == pytest.approx(0.9)
    assert apply_gain(x, 1.1).samples[2] == 1.0
    with pytest.raises(ValueError):
        apply_gain(x, 0.0)


def test_gain_composes_without_clamping():
    x = AudioBuffer(np.random.default_rng(4).uniform(-0.5, 0.5, 100))
    np.testing.assert_allclose(apply_gain(apply_gain(x, 1.05), 0.95).samples, apply_gain(x, 1.05 * 0.95).samples, rtol=1e-14)


def test_equal_power_at_zero_db_adds_noise_unscaled():
    rng = np.random.default_rng(5)
    s = rng.normal(0, 0.1, 500)
    n = rng.normal(0, 0.1, 500)
    n *= np.sqrt(np.mean(s**2) / np.mean(n**2))
    out = mix_noise(AudioBuffer(s), AudioBuffer(n), 0.0)
    np.testing.assert_allclose(out.samples, s + n, atol=1e-15)


def test_high_snr_leaves_signal_nearly_intact():
    rng = np.random.default_rng(6)
    s = rng.normal(0, 0.1, 500)
    n = rng.normal(0, 0.3, 500)
    out = mix_noise(AudioBuffer(s), AudioBuffer(n), 60.0)
    g = 1e-3 * np.sqrt(np.mean(s**2) / np.mean(n**2))
    np.testing.assert_allclose(out.samples - s, g * n, atol=1e-15)


@pytest.mark.parametrize("snr", [8.0, 12.0, 20.0])
def test_measured_snr_within_tolerance(snr):
    rng = np.random.default_rng(int(snr))
    s = rng.normal(0, 0.05, 8000)
    n = rng.normal(0, 0.05, 3000)  # looped to the signal length
    out = mix_noise(AudioBuffer(s), AudioBuffer(n), snr).samples
    added = out - s
    measured = 10 * np.log10(np.mean(s**2) / np.mean(added**2))
    assert abs(measured - snr) < 0.1


def test_mix_noise_errors():
    s = AudioBuffer(np.ones(10) * 0.1)
    with pytest.raises(ValueError):
        mix_noise(s, AudioBuffer(np.zeros(10)), 10)
    with pytest.raises(ValueError):
        mix_noise(s, AudioBuffer(np.ones(10), 8000), 10)


def test_speed_identity_and_length():
    x = AudioBuffer(np.random.default_rng(7).uniform(-0.5, 0.5, 16000))
    same = speed_perturb(x, 1.0)
    assert len(same) == 16000 and np.max(np.abs(same.samples - x.samples)) < 1e-6
    assert abs(len(speed_perturb(x, 2.0)) - 8000) <= 1
    for rate in (0.9, 0.93, 1.07, 1.1):
        assert abs(len(speed_perturb(x, rate)) - round(16000 / rate)) <= 1
    with pytest.raises(ValueError):
        speed_perturb(x, 2.5)


@pytest.mark.parametrize("f0,rate", [(440.0, 1.1), (440.0, 0.9), (1000.0, 1.05)])
def test_speed_shifts_spectral_peak(f0, rate):
    t = np.arange(32000) / 16000
    out = speed_perturb(AudioBuffer(0.5 * np.sin(2 * np.pi * f0 * t)), rate).samples
    spectrum = np.abs(np.fft.rfft(out * np.hanning(out.size)))
    bin_hz = 16000 / out.size
    peak_hz = np.argmax(spectrum) * bin_hz
    assert abs(peak_hz - f0 * rate) <= bin_hz


# ---------------------------------------------------------------- augmentation driver


def test_degenerate_policy_is_identity():
    x = AudioBuffer(np.random.default_rng(8).uniform(-0.5, 0.5, 1000))
    policy = AugPolicy(gain_range=(1, 1), noise_prob=0.0, speed_range=(1, 1))
    assert np.array_equal(augment(x, [], policy, 0).samples, x.samples)


def test_augment_is_deterministic_per_seed():
    rng = np.random.default_rng(9)
    x = AudioBuffer(rng.uniform(-0.5, 0.5, 4000))
    pool = [AudioBuffer(rng.normal(0, 0.1, 1000))]
    policy = AugPolicy(noise_prob=0.5)
    a = augment(x, pool, policy, utterance_rng(11, 3))
    b = augment(x, pool, policy, utterance_rng(11, 3))
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(augment(x, pool, policy).samples, augment(x, pool, policy).samples)


def test_noise_frequency_monte_carlo():
    policy = AugPolicy()
    rng = np.random.default_rng(10)
    draws = [draw_augmentation(policy, rng, 4) for _ in range(10_000)]
    freq = np.mean([d.noise_index is not None for d in draws])
    assert abs(freq - 0.15) < 0.01
    gains = np.array([d.gain for d in draws])
    assert gains.min() >= 0.9 and gains.max() <= 1.1
    snrs = np.array([d.snr_db for d in draws if d.snr_db is not None])
    assert snrs.min() >= 8 and snrs.max() <= 20


def test_augment_rejects_empty_pool():
    with pytest.raises(ValueError):
        augment(AudioBuffer(np.zeros(100)), [], AugPolicy(), 0)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugPolicy(gain_range=(1.1, 0.9))
    with pytest.raises(ValueError):
        AugPolicy(noise_prob=1.5)
    with pytest.raises(ValueError):
        AugPolicy(speed_range=(0.1, 1.0))
