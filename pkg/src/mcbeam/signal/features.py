"""Log mel filterbank features with normalization, deltas and frame decimation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff import ComplexTensor, Tensor
from ..autodiff import tensor as T

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    """Features shaped (T', D) or (B, T', D); ``frame_rate`` in frames per second."""

    feats: Tensor
    frame_rate: float | None = None

    @property
    def n_frames(self) -> int:
        return self.feats.shape[-2]

    @property
    def dim(self) -> int:
        return self.feats.shape[-1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(fft_size: int, sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape (fft_size // 2 + 1, n_mels)."""
    n_bins = fft_size // 2 + 1
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} frequency bins")
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / fft_size
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lo) / (mid - lo)
    down = (hi - freqs[:, None]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    # filters narrower than the bin spacing can miss every bin; pin them to the nearest one
    for j in np.flatnonzero(fb.sum(axis=0) <= 0):
        fb[np.argmin(np.abs(freqs - mid[j])), j] = 1.0
    return fb


def filter_centers(fft_size: int, sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def delta_matrix(n_frames: int, window: int = 2) -> np.ndarray:
    """Regression-delta operator with edge replication: ``d = D @ c``."""
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    d = np.zeros((n_frames, n_frames))
    for t in range(n_frames):
        for k in range(1, window + 1):
            d[t, min(t + k, n_frames - 1)] += k / denom
            d[t, max(t - k, 0)] -= k / denom
    return d


def normalize(x: Tensor) -> Tensor:
    """Per-utterance mean/variance normalization over the time axis (-2)."""
    mu = x.mean(axis=-2, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-2, keepdims=True)
    return centered / T.sqrt(T.maximum(var, VAR_FLOOR))


def log_fbank(s_hat: ComplexTensor, fbank: np.ndarray) -> Tensor:
    power = s_hat.re * s_hat.re + s_hat.im * s_hat.im
    return T.log(T.maximum(power @ fbank, LOG_FLOOR))


def feature(
    s_hat: ComplexTensor,
    fbank: np.ndarray,
    subsample: int = 3,
    delta_window: int = 2,
    augment: Callable[[Tensor], Tensor] | None = None,
    frame_rate: float | None = None,
) -> FeatureSequence:
    """Features of a single-channel spectrogram shaped (T, F) or (B, T, F).

    Output dims are [statics, deltas, delta-deltas], 3 * n_mels in total;
    ``augment`` (if given) sees the normalized statics before deltas.
    """
    n_frames = s_hat.shape[-2]
    if s_hat.shape[-1] != fbank.shape[0]:
        raise ValueError(f"spectrogram has {s_hat.shape[-1]} bins, filterbank expects {fbank.shape[0]}")
    if n_frames < 2 * delta_window + 1:
        raise ValueError(f"need at least {2 * delta_window + 1} frames for deltas, got {n_frames}")
    statics = normalize(log_fbank(s_hat, fbank))
    if augment is not None:
        statics = augment(statics)
    dmat = delta_matrix(n_frames, delta_window)
    d1 = T.matmul(dmat, statics)
    d2 = T.matmul(dmat, d1)
    full = T.concat([statics, d1, d2], axis=-1)
    sl = (Ellipsis, slice(None, None, subsample), slice(None))
    rate = None if frame_rate is None else frame_rate / subsample
    return FeatureSequence(full[sl], rate)
