"""Synthetic toy corpora for end-to-end checks at desk scale.

Each label is a short two-tone burst; every tone frequency is shared by two
labels, so a label is only identified by its pair. The interferer is
stationary narrowband noise on the same frequencies, played from a second
position in the room, so a single channel is ambiguous while spatial
filtering can separate target and interferer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ManifestRecord, write_manifest
from .ctccrf import BLANK_SYMBOL, decode_tokens
from .roomsim import ArraySpec, RoomSpec, array_rirs, simulate
from .signal.stft import Waveform
from .signal.wavio import write_wav
from .trainer.data import Utterance

TONES = (400.0, 700.0, 1100.0, 1600.0, 2300.0, 3100.0)
# label k (1-based) -> indices into TONES
PAIRS = ((0, 3), (1, 4), (2, 5), (0, 4), (1, 5), (2, 3), (0, 5), (1, 3), (2, 4), (3, 5), (0, 2))


@dataclass
class ToySpec:
    vocab: int = 7
    fs: int = 8000
    n_samples: int = 4800
    min_len: int = 2
    max_len: int = 4
    snr_db: float = 0.0
    room: RoomSpec = field(default_factory=lambda: RoomSpec(absorption=0.8, max_order=2, fs=8000))
    array: ArraySpec = field(default_factory=lambda: ArraySpec.linear((5.0, 2.25, 1.0), n=2, spacing=0.05))
    source: tuple = (2.5, 3.73, 1.76)
    noise_position: tuple = (7.5, 5.5, 1.5)

    def __post_init__(self):
        if not 2 <= self.vocab <= len(PAIRS) + 1:
            raise ValueError(f"toy vocab must be in [2, {len(PAIRS) + 1}]")


def toy_units(vocab: int) -> list[str]:
    return [BLANK_SYMBOL] + [f"s{k}" for k in range(1, vocab)]


def random_labels(rng: np.random.Generator, spec: ToySpec) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return [int(x) for x in rng.integers(1, spec.vocab, size=n)]


def label_signal(labels, rng: np.random.Generator, spec: ToySpec) -> np.ndarray:
    """Dry mono signal: lead-in silence, then one tapered burst per label with short gaps."""
    fs = spec.fs
    out = np.zeros(spec.n_samples)
    pos = int(rng.uniform(0.03, 0.06) * fs)
    for k in labels:
        dur = int(rng.uniform(0.06, 0.09) * fs)
        if pos + dur > spec.n_samples:
            raise ValueError("toy utterance does not fit; raise n_samples or lower max_len")
        t = np.arange(dur) / fs
        burst = np.zeros(dur)
        for i in PAIRS[k - 1]:
            f = TONES[i] * rng.uniform(0.98, 1.02)
            burst += rng.uniform(0.7, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out[pos : pos + dur] += burst * np.hanning(dur)
        pos += dur + int(rng.uniform(0.015, 0.04) * fs)
    return out


def narrowband_noise(n: int, rng: np.random.Generator, fs: int, width: float = 150.0) -> np.ndarray:
    """Stationary Gaussian noise confined to bands around the label tones."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = np.zeros_like(freqs)
    for f in TONES:
        shape += rng.uniform(0.5, 1.0) * (np.abs(freqs - f) < width / 2)
    return np.fft.irfft(spec * shape, n)


def make_multi(n_utts: int, seed: int, spec: ToySpec | None = None, prefix: str = "toy") -> list[Utterance]:
    """Simulated C-channel mixtures with the speech image kept as the clean reference."""
    spec = spec or ToySpec()
    rng = np.random.default_rng([int(seed), 11])
    rirs = array_rirs(spec.room, spec.array, spec.source)
    utts = []
    for i in range(n_utts):
        labels = random_labels(rng, spec)
        dry = Waveform(label_signal(labels, rng, spec)[None], spec.fs)
        noise = Waveform(narrowband_noise(spec.n_samples + 400, rng, spec.fs)[None], spec.fs)
        mix, parts = simulate(
            dry, spec.room, spec.array, spec.source, noise, spec.snr_db, spec.noise_position,
            rirs=rirs, return_parts=True,
        )
        n = spec.n_samples
        utts.append(
            Utterance(
                f"{prefix}{i:04d}",
                Waveform(mix.samples[:, :n], spec.fs),
                labels,
                tag="simulated",
                clean=Waveform(parts["speech"][:, :n], spec.fs),
                extra={"noise": parts["noise"][:, :n]},
            )
        )
    return utts


def make_single(n_utts: int, seed: int, spec: ToySpec | None = None, snr_db: float = 10.0, prefix: str = "mono") -> list[Utterance]:
    """Mono close-talk style utterances: dry signal plus the same noise type at a milder SNR."""
    spec = spec or ToySpec()
    rng = np.random.default_rng([int(seed), 12])
    utts = []
    for i in range(n_utts):
        labels = random_labels(rng, spec)
        dry = label_signal(labels, rng, spec)
        noise = narrowband_noise(spec.n_samples, rng, spec.fs)
        noise *= np.sqrt(np.mean(dry**2) / np.mean(noise**2) / 10.0 ** (snr_db / 10.0))
        utts.append(Utterance(f"{prefix}{i:04d}", Waveform((dry + noise)[None], spec.fs), labels, tag="single",
                              clean=Waveform(dry[None], spec.fs)))
    return utts


def write_corpus(utts, out_dir, units, name: str = "manifest", with_clean: bool = True) -> str:
    """Write wavs plus a JSONL manifest; returns the manifest path."""
    out = Path(out_dir)
    records = []
    for u in utts:
        wav = out / "wav" / f"{u.utt_id}.wav"
        write_wav(wav, u.wave)
        clean = None
        if with_clean and u.clean is not None:
            clean = out / "wav" / f"{u.utt_id}.clean.wav"
            write_wav(clean, u.clean)
        records.append(ManifestRecord(u.utt_id, str(wav), u.channels, u.wave.sample_rate,
                                      " ".join(decode_tokens(u.labels, units)), u.tag,
                                      None if clean is None else str(clean)))
    path = out / f"{name}.jsonl"
    write_manifest(path, records)
    return str(path)
