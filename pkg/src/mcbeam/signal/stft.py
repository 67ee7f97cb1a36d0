"""Short-time Fourier analysis and overlap-add synthesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ComplexTensor, Tensor
from ..autodiff import tensor as T

MAG_FLOOR = 1e-12


@dataclass
class Waveform:
    """Time-domain signal, ``samples`` shaped (channels, n)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError(f"waveform samples must be (channels, n), got {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, c: int) -> Waveform:
        return Waveform(self.samples[c : c + 1], self.sample_rate)


@dataclass
class ComplexSpectrogram:
    """STFT coefficients shaped (T, F, C)."""

    coeffs: ComplexTensor
    frame_shift: int
    frame_length: int
    sample_rate: int = 16000
    n_samples: int | None = None

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[1]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[2]

    def numpy(self) -> np.ndarray:
        return self.coeffs.numpy()


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    if kind in ("rect", "boxcar"):
        return np.ones(n)
    raise ValueError(f"unknown window {kind!r}")


def stft(w: Waveform, fft_size: int = 512, frame_shift: int = 160, window: str = "hann") -> ComplexSpectrogram:
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < frame_shift <= fft_size:
        raise ValueError(f"frame_shift must be in (0, fft_size], got {frame_shift}")
    n = w.n_samples
    if n < fft_size:
        raise ValueError(f"waveform of {n} samples is shorter than one frame ({fft_size})")
    n_frames = 1 + (n - fft_size) // frame_shift
    win = _window(window, fft_size)
    idx = np.arange(fft_size)[None, :] + frame_shift * np.arange(n_frames)[:, None]
    frames = w.samples[:, idx] * win  # (C, T, N)
    spec = np.fft.rfft(frames, axis=-1).transpose(1, 2, 0)  # (T, F, C)
    return ComplexSpectrogram(ComplexTensor.from_numpy(spec), frame_shift, fft_size, w.sample_rate, n)


def istft(s: ComplexSpectrogram, window: str = "hann") -> Waveform:
    z = s.numpy()
    if z.ndim != 3 or z.shape[1] != s.frame_length // 2 + 1:
        raise ValueError(f"spectrogram shape {z.shape} inconsistent with frame length {s.frame_length}")
    n_frames, _, chans = z.shape
    n_fft, hop = s.frame_length, s.frame_shift
    win = _window(window, n_fft)
    frames = np.fft.irfft(z.transpose(2, 0, 1), n=n_fft, axis=-1) * win  # (C, T, N)
    length = (n_frames - 1) * hop + n_fft
    out = np.zeros((chans, length))
    norm = np.zeros(length)
    for t in range(n_frames):
        out[:, t * hop : t * hop + n_fft] += frames[:, t]
        norm[t * hop : t * hop + n_fft] += win**2
    good = norm > 1e-10
    out[:, good] /= norm[good]
    out[:, ~good] = 0.0
    if s.n_samples is not None and s.n_samples > length:
        out = np.pad(out, ((0, 0), (0, s.n_samples - length)))
    return Waveform(out, s.sample_rate)


def magnitude(z: ComplexTensor) -> Tensor:
    """|z| with a tiny floor under the square root so the gradient exists at 0."""
    return T.sqrt(z.re * z.re + z.im * z.im + MAG_FLOOR)
