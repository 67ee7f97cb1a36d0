"""16-bit PCM WAV reading and writing."""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .stft import Waveform


def read_wav(path: str | Path, expect_rate: int | None = None) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported (sample width {fh.getsampwidth()})")
        rate = fh.getframerate()
        chans = fh.getnchannels()
        raw = fh.readframes(fh.getnframes())
    if expect_rate is not None and rate != expect_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expect_rate}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data.reshape(-1, chans).T.copy(), rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(w.channels)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.T.tobytes())
