"""Utterances, equal-length batching and two-source data scheduling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..signal.stft import Waveform, stft


@dataclass
class Utterance:
    utt_id: str
    wave: Waveform
    labels: list[int]
    tag: str = "real"  # real | simulated | single
    clean: Waveform | None = None  # parallel clean reference, when known
    extra: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.wave.channels


@dataclass
class BatchSource:
    tag: str  # "multi" or "single"
    utts: list[Utterance]
    index: int = 0

    def __post_init__(self):
        if self.tag not in ("multi", "single"):
            raise ValueError(f"batch tag must be multi or single, got {self.tag}")
        want = {u.channels for u in self.utts}
        if self.tag == "single" and want != {1}:
            raise ValueError("single-channel batches must hold mono utterances")
        if self.tag == "multi" and min(want) < 2:
            raise ValueError("multi-channel batches need at least 2 channels")


def make_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator, tag: str) -> list[BatchSource]:
    """Shuffle, then chunk within groups of identical (length, channels) so no padding is needed."""
    if not utts:
        return []
    groups: dict[tuple[int, int], list[Utterance]] = {}
    for u in utts:
        groups.setdefault((u.wave.n_samples, u.channels), []).append(u)
    batches: list[list[Utterance]] = []
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        batches.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
    order = rng.permutation(len(batches))
    return [BatchSource(tag, batches[i], index=k) for k, i in enumerate(order)]


def schedule_batches(
    multi: Sequence[BatchSource], single: Sequence[BatchSource], rng: np.random.Generator
) -> Iterator[BatchSource]:
    """Interleave two batch lists; each draw picks a source with probability
    proportional to its remaining batch count, so both are exhausted together."""
    queues = {"multi": list(multi), "single": list(single)}
    pos = {"multi": 0, "single": 0}
    while True:
        left_m = len(queues["multi"]) - pos["multi"]
        left_s = len(queues["single"]) - pos["single"]
        if left_m + left_s == 0:
            return
        tag = "multi" if rng.random() * (left_m + left_s) < left_m else "single"
        yield queues[tag][pos[tag]]
        pos[tag] += 1


class SpectrumCache:
    """STFT of each utterance computed once (used whenever waveforms are not perturbed)."""

    def __init__(self, fft_size: int, frame_shift: int):
        self.fft_size = fft_size
        self.frame_shift = frame_shift
        self._cache: dict[str, tuple[Waveform, np.ndarray]] = {}

    def get(self, utt: Utterance) -> np.ndarray:
        hit = self._cache.get(utt.utt_id)
        # a reused id with a different waveform (e.g. two corpora with one prefix) must not hit
        if hit is None or hit[0] is not utt.wave:
            hit = self._cache[utt.utt_id] = (utt.wave, self.compute(utt.wave))
        return hit[1]

    def compute(self, wave: Waveform) -> np.ndarray:
        return stft(wave, self.fft_size, self.frame_shift).numpy()
