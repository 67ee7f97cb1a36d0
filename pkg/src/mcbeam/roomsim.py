"""Shoebox-room simulation with the image source method.

Walls are indexed (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz). An image with
reflection counts k_w on wall w has gain prod_w sqrt(1 - alpha_w) ** k_w.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .signal.stft import Waveform

KERNEL_TAPS = 81
TAIL_ENERGY = 1e-6

DEFAULT_SOURCE = (2.5, 3.73, 1.76)
DEFAULT_ARRAY_CENTER = (5.0, 2.25, 1.0)


@dataclass
class RoomSpec:
    dims: tuple[float, float, float] = (10.0, 7.5, 3.5)
    absorption: float | tuple[float, ...] = 0.3
    max_order: int = 10
    c: float = 343.0
    fs: int = 16000

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"room dims must be three positive lengths, got {self.dims}")
        alpha = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        if np.any(alpha <= 0) or np.any(alpha > 1):
            raise ValueError(f"absorption must lie in (0, 1], got {self.absorption}")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")
        if self.c <= 0 or self.fs <= 0:
            raise ValueError("speed of sound and sample rate must be positive")

    @property
    def alphas(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,)).copy()

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dims)))


@dataclass
class ArraySpec:
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] != 3:
            raise ValueError("mic positions must be (C, 3)")

    @property
    def channels(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def tablet(cls, center=DEFAULT_ARRAY_CENTER, width: float = 0.19, height: float = 0.10) -> ArraySpec:
        """Six mics on a tablet frame: three along the top edge, three along the bottom.

        The frame stands upright in the x-z plane; the x offsets are
        (-width/2, 0, +width/2) and the rows sit at z = +/- height/2.
        """
        cx, cy, cz = center
        xs = (-width / 2, 0.0, width / 2)
        top = [(cx + dx, cy, cz + height / 2) for dx in xs]
        bottom = [(cx + dx, cy, cz - height / 2) for dx in xs]
        return cls(np.array(top + bottom))

    @classmethod
    def linear(cls, center=DEFAULT_ARRAY_CENTER, n: int = 2, spacing: float = 0.1, axis: int = 0) -> ArraySpec:
        offs = (np.arange(n) - (n - 1) / 2) * spacing
        pos = np.tile(np.asarray(center, dtype=float), (n, 1))
        pos[:, axis] += offs
        return cls(pos)

    def validate(self, room: RoomSpec) -> None:
        for i, p in enumerate(self.positions):
            if not room.contains(p):
                raise ValueError(f"mic {i} at {tuple(p)} is not strictly inside the room")


@dataclass
class Rir:
    taps: np.ndarray
    fs: int
    direct_delay: float = field(default=0.0)

    def __len__(self) -> int:
        return len(self.taps)


def image_sources(room: RoomSpec, src, order: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Image positions (N, 3) and reflection gains (N,) for all images of order <= K."""
    src = np.asarray(src, dtype=float)
    if not room.contains(src):
        raise ValueError(f"source {tuple(src)} is not strictly inside the room")
    k = room.max_order if order is None else order
    if k < 0:
        raise ValueError("image order must be >= 0")
    n = np.arange(-k, k + 1)
    u = np.array([0, 1])
    # per axis: coordinate, reflections on the near wall (|n - u|) and on the far wall (|n|)
    coords, near, far = [], [], []
    for axis in range(3):
        nn, uu = np.meshgrid(n, u, indexing="ij")
        nn, uu = nn.ravel(), uu.ravel()
        coords.append((1 - 2 * uu) * src[axis] + 2 * nn * room.dims[axis])
        near.append(np.abs(nn - uu))
        far.append(np.abs(nn))
    m = len(coords[0])
    ix, iy, iz = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    counts = np.stack(
        [near[0][ix], far[0][ix], near[1][iy], far[1][iy], near[2][iz], far[2][iz]], axis=1
    )
    total = counts.sum(axis=1)
    keep = total <= k
    counts = counts[keep]
    pos = np.stack([coords[0][ix[keep]], coords[1][iy[keep]], coords[2][iz[keep]]], axis=1)
    beta = np.sqrt(1.0 - room.alphas)
    with np.errstate(divide="ignore"):
        gains = np.prod(np.where(counts > 0, beta ** counts, 1.0), axis=1)
    return pos, gains


def _fractional_delay_kernel(frac_offsets: np.ndarray) -> np.ndarray:
    half = KERNEL_TAPS // 2
    win = 0.5 * (1.0 + np.cos(np.pi * frac_offsets / (half + 1)))
    return np.sinc(frac_offsets) * win


def rir(room: RoomSpec, src=DEFAULT_SOURCE, mic=DEFAULT_ARRAY_CENTER, order: int | None = None) -> Rir:
    mic = np.asarray(mic, dtype=float)
    if not room.contains(mic):
        raise ValueError(f"mic {tuple(mic)} is not strictly inside the room")
    pos, gains = image_sources(room, src, order)
    r = np.linalg.norm(pos - mic, axis=1)
    if np.any(r <= 0):
        raise ValueError("microphone coincides with the source")
    present = gains > 0
    pos, gains, r = pos[present], gains[present], r[present]
    delay = r / room.c * room.fs
    amp = gains / (4.0 * np.pi * r)
    half = KERNEL_TAPS // 2
    base = np.floor(delay).astype(int)
    offs = np.arange(-half, half + 1)
    idx = base[:, None] + offs[None, :]
    vals = amp[:, None] * _fractional_delay_kernel(idx - delay[:, None])
    ok = idx >= 0
    taps = np.zeros(int(idx.max()) + 1)
    np.add.at(taps, idx[ok], vals[ok])
    taps = _truncate_tail(taps)
    direct = float(np.linalg.norm(np.asarray(src, dtype=float) - mic) / room.c * room.fs)
    return Rir(taps, room.fs, direct)


def _truncate_tail(taps: np.ndarray) -> np.ndarray:
    energy = taps**2
    total = energy.sum()
    if total == 0:
        return taps
    remaining = np.cumsum(energy[::-1])[::-1]  # energy from index i to the end
    cut = np.flatnonzero(remaining >= TAIL_ENERGY * total)
    return taps[: cut[-1] + 1] if len(cut) else taps


def array_rirs(room: RoomSpec, array: ArraySpec, src=DEFAULT_SOURCE, order: int | None = None) -> list[Rir]:
    array.validate(room)
    return [rir(room, src, m, order) for m in array.positions]


def convolve(wave: Waveform, rirs: Sequence[Rir | np.ndarray]) -> np.ndarray:
    """Per-mic convolution of a mono wave; output (C, n + max_rir_len - 1)."""
    if wave.channels != 1:
        raise ValueError(f"simulation expects a mono source, got {wave.channels} channels")
    taps = [r.taps if isinstance(r, Rir) else np.asarray(r, dtype=float) for r in rirs]
    length = wave.n_samples + max(len(t) for t in taps) - 1
    out = np.zeros((len(taps), length))
    for c, t in enumerate(taps):
        y = fftconvolve(wave.samples[0], t) if len(t) > 1 else wave.samples[0] * t[0]
        out[c, : len(y)] = y
    return out


def scale_to_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float, per_channel: bool = True) -> np.ndarray:
    """Scale noise so that 10 log10(P_signal / P_noise) = snr_db (per channel by default)."""
    axis = -1 if per_channel else None
    ps = np.mean(signal**2, axis=axis, keepdims=per_channel)
    pn = np.mean(noise**2, axis=axis, keepdims=per_channel)
    gain = np.sqrt(ps / np.maximum(pn, 1e-300) / 10.0 ** (snr_db / 10.0))
    return noise * gain


def simulate(
    wave: Waveform,
    room: RoomSpec | None = None,
    array: ArraySpec | None = None,
    src=DEFAULT_SOURCE,
    noise: Waveform | None = None,
    snr_db: float | None = None,
    noise_position=None,
    rng: np.random.Generator | None = None,
    rirs: Sequence[Rir | np.ndarray] | None = None,
    peak: float = 0.9,
    return_parts: bool = False,
):
    """Multi-channel recording of a mono source, optionally with noise at a given SNR.

    Noise handling: a mono noise with ``noise_position`` is convolved with its
    own RIRs (a directional interferer, scaled by one common gain to keep its
    spatial image intact); a C-channel noise is added as is; a mono noise
    without position is cut into C independent random segments (approximately
    diffuse). SNR is measured against the reverberant speech per channel.
    If the mixture would clip, everything is scaled so its peak is ``peak``.
    """
    room = room or RoomSpec(fs=wave.sample_rate)
    if wave.sample_rate != room.fs:
        raise ValueError(f"wave sample rate {wave.sample_rate} != room rate {room.fs}")
    if rirs is None:
        array = array or ArraySpec.tablet()
        rirs = array_rirs(room, array, src)
    speech = convolve(wave, rirs)
    chans, length = speech.shape
    noise_img = None
    if noise is not None:
        if noise.sample_rate != wave.sample_rate:
            raise ValueError(f"noise sample rate {noise.sample_rate} != {wave.sample_rate}")
        if snr_db is None:
            raise ValueError("noise given without snr_db")
        if noise_position is not None:
            if array is None:
                raise ValueError("directional noise needs the array geometry")
            nimg = convolve(noise, array_rirs(room, array, noise_position))
            noise_img = _fit(nimg, length)
            noise_img = scale_to_snr(speech, noise_img, snr_db, per_channel=False)
        elif noise.channels == chans:
            noise_img = scale_to_snr(speech, _fit(noise.samples, length), snr_db)
        elif noise.channels == 1:
            rng = rng or np.random.default_rng(0)
            segs = []
            src_noise = noise.samples[0]
            for _ in range(chans):
                shift = int(rng.integers(len(src_noise)))
                segs.append(_fit(np.roll(src_noise, shift)[None, :], length)[0])
            noise_img = scale_to_snr(speech, np.stack(segs), snr_db)
        else:
            raise ValueError(f"noise has {noise.channels} channels; expected 1 or {chans}")
    mix = speech if noise_img is None else speech + noise_img
    top = np.max(np.abs(mix)) if mix.size else 0.0
    gain = peak / top if top > 1.0 else 1.0
    out = Waveform(mix * gain, wave.sample_rate)
    if return_parts:
        parts = {"speech": speech * gain, "noise": None if noise_img is None else noise_img * gain}
        return out, parts
    return out


def _fit(x: np.ndarray, length: int) -> np.ndarray:
    """Tile or crop (C, n) to (C, length)."""
    n = x.shape[1]
    if n >= length:
        return x[:, :length]
    reps = -(-length // n)
    return np.tile(x, (1, reps))[:, :length]
