# %% [markdown]
# # Features and augmentation
# A synthetic tone burst goes through the log-Mel front end, then through one
# random augmentation draw.

# %%
import numpy as np

from pdws.audio import AudioBuffer, AugPolicy, FeatConfig, augment, log_mel, mix_noise, num_frames, speed_perturb

sr = 16000
t = np.arange(sr) / sr
tone = AudioBuffer(0.3 * np.sin(2 * np.pi * 440 * t), sr)
feats = log_mel(tone)
print(feats.data.shape, num_frames(sr, FeatConfig()))

# %% [markdown]
# The strongest Mel band should sit near 440 Hz.

# %%
from pdws.audio import mel_center_frequencies

centres = mel_center_frequencies(FeatConfig())
print("peak band centre (Hz):", round(float(centres[feats.data.mean(axis=0).argmax()]), 1))

# %% [markdown]
# Noise mixing hits the requested SNR; speed perturbation moves the pitch.

# %%
noise = AudioBuffer(np.random.default_rng(0).normal(0, 0.1, sr), sr)
mixed = mix_noise(tone, noise, 10.0)
residual = mixed.samples - tone.samples
print("SNR (dB):", round(10 * np.log10(np.mean(tone.samples**2) / np.mean(residual**2)), 3))

fast = speed_perturb(tone, 1.1)
spec = np.abs(np.fft.rfft(fast.samples))
print("peak after speed 1.1 (Hz):", round(np.fft.rfftfreq(len(fast.samples), 1 / sr)[spec.argmax()], 1))

# %%
rng = np.random.default_rng(7)
out = augment(tone, [noise], AugPolicy(noise_prob=1.0), rng)
print(len(tone.samples), "->", len(out.samples))
