"""Waveform perturbation ahead of the STFT and time/frequency masking of features."""
from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from .autodiff import Tensor
from .config import AugmentPolicy, SpecAugmentConfig, WavAugmentConfig
from .signal.stft import Waveform


def utterance_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(base_seed), int(index)])


def apply_gain(w: Waveform, gain_db: float) -> Waveform:
    return Waveform(w.samples * 10.0 ** (gain_db / 20.0), w.sample_rate)


def change_speed(w: Waveform, factor: float) -> Waveform:
    """Resample so playback at the original rate runs ``factor`` times faster."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return w
    ratio = Fraction(factor).limit_denominator(100)
    y = resample_poly(w.samples, ratio.denominator, ratio.numerator, axis=-1)
    return Waveform(y, w.sample_rate)


def add_white_noise(w: Waveform, snr_db: float, rng: np.random.Generator) -> Waveform:
    power = np.mean(w.samples**2, axis=-1, keepdims=True)
    noise = rng.standard_normal(w.samples.shape) * np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return Waveform(w.samples + noise, w.sample_rate)


def wav_augment(w: Waveform, policy: AugmentPolicy | WavAugmentConfig, rng: np.random.Generator) -> Waveform:
    """Gain, speed and additive noise, each applied with its own probability.

    Gain and speed are identical across channels so inter-channel phase is kept.
    """
    p = policy.wav if isinstance(policy, AugmentPolicy) else policy
    # draw every variate up front so the rng stream does not depend on which branches fire
    do_gain, do_speed, do_noise = rng.random(3)
    gain = rng.uniform(*p.gain_db)
    speed = p.speeds[int(rng.integers(len(p.speeds)))] if p.speeds else 1.0
    snr = rng.uniform(*p.snr_db)
    out = w
    if do_gain < p.gain_p:
        out = apply_gain(out, gain)
    if do_speed < p.speed_p:
        out = change_speed(out, speed)
    if do_noise < p.noise_p:
        out = add_white_noise(out, snr, rng)
    return out


def spec_masks(n_frames: int, n_dims: int, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean (T, D) array, True where a time or frequency stripe covers the bin."""
    masked = np.zeros((n_frames, n_dims), dtype=bool)
    for _ in range(cfg.n_time_masks):
        width = min(int(rng.integers(cfg.max_time_width + 1)), n_frames)
        start = int(rng.integers(n_frames - width + 1))
        masked[start : start + width, :] = True
    for _ in range(cfg.n_freq_masks):
        width = min(int(rng.integers(cfg.max_freq_width + 1)), n_dims)
        start = int(rng.integers(n_dims - width + 1))
        masked[:, start : start + width] = True
    return masked


def spec_augment(feats: Tensor, policy: AugmentPolicy | SpecAugmentConfig, rng: np.random.Generator) -> Tensor:
    """Replace masked stripes with the utterance mean; works on (T, D) or (B, T, D)."""
    cfg = policy.spec if isinstance(policy, AugmentPolicy) else policy
    if cfg.n_time_masks == 0 and cfg.n_freq_masks == 0:
        return feats
    squeeze = feats.ndim == 2
    x = feats.reshape((1,) + feats.shape) if squeeze else feats
    bsz, steps, dims = x.shape
    masked = np.stack([spec_masks(steps, dims, cfg, rng) for _ in range(bsz)])
    fill = x.data.mean(axis=(1, 2), keepdims=True)
    out = x * (~masked) + fill * masked
    return out.reshape(feats.shape) if squeeze else out
