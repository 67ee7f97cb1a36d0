"""JSON-lines manifests and their conversion to in-memory utterances.

One record per line::

    {"utt_id": "u1", "audio_path": "u1.wav", "channels": 2, "sample_rate": 8000,
     "transcript": "s1 s3", "source_tag": "simulated"}

Relative audio paths resolve against the manifest's directory. An optional
``clean_path`` names the parallel clean (speech-only) recording.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .ctccrf import encode
from .signal.wavio import read_wav
from .trainer.data import Utterance

SOURCE_TAGS = ("real", "simulated", "single")
_REQUIRED = ("utt_id", "audio_path", "channels", "sample_rate", "transcript", "source_tag")


class DataError(ValueError):
    """Malformed corpus input (manifest, audio, units)."""


@dataclass
class ManifestRecord:
    utt_id: str
    audio_path: str
    channels: int
    sample_rate: int
    transcript: str
    source_tag: str
    clean_path: str | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


def read_manifest(path: str | Path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    base = path.parent
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise DataError(f"{path}:{lineno}: record must be an object")
        missing = [k for k in _REQUIRED if k not in raw]
        if missing:
            raise DataError(f"{path}:{lineno}: missing fields {missing}")
        extra = set(raw) - set(_REQUIRED) - {"clean_path"}
        if extra:
            raise DataError(f"{path}:{lineno}: unknown fields {sorted(extra)}")
        try:
            rec = ManifestRecord(
                str(raw["utt_id"]), str(raw["audio_path"]), int(raw["channels"]), int(raw["sample_rate"]),
                str(raw["transcript"]), str(raw["source_tag"]), raw.get("clean_path"),
            )
        except (TypeError, ValueError):
            raise DataError(f"{path}:{lineno}: channels and sample_rate must be integers") from None
        if rec.source_tag not in SOURCE_TAGS:
            raise DataError(f"{path}:{lineno}: source_tag {rec.source_tag!r} not in {SOURCE_TAGS}")
        if rec.utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {rec.utt_id!r}")
        if rec.channels < 1 or rec.sample_rate <= 0:
            raise DataError(f"{path}:{lineno}: channels and sample_rate must be positive")
        seen.add(rec.utt_id)
        rec.audio_path = str(base / rec.audio_path)
        if rec.clean_path is not None:
            rec.clean_path = str(base / rec.clean_path)
        if check_files:
            for p in filter(None, (rec.audio_path, rec.clean_path)):
                if not Path(p).is_file():
                    raise DataError(f"{path}:{lineno}: audio file {p} does not exist")
        records.append(rec)
    return records


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    """Write records with audio paths made relative to the manifest directory when possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for rec in records:
        d = ManifestRecord(**asdict(rec))
        d.audio_path = _relative(d.audio_path, base)
        if d.clean_path is not None:
            d.clean_path = _relative(d.clean_path, base)
        lines.append(d.to_json())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(ln + "\n" for ln in lines))


def _relative(p: str, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(Path(p).resolve())


def load_utterances(records: Sequence[ManifestRecord], units: Sequence[str] | None, with_clean: bool = False) -> list[Utterance]:
    """Read audio and encode transcripts; ``units=None`` skips label encoding."""
    out = []
    for rec in records:
        try:
            wave = read_wav(rec.audio_path, rec.sample_rate)
        except (OSError, EOFError, ValueError) as exc:
            raise DataError(f"{rec.utt_id}: cannot read {rec.audio_path}: {exc}") from None
        if wave.channels != rec.channels:
            raise DataError(f"{rec.utt_id}: manifest says {rec.channels} channels, file has {wave.channels}")
        labels: list[int] = []
        if units is not None:
            try:
                labels = encode(rec.transcript.split(), units)
            except ValueError as exc:
                raise DataError(f"{rec.utt_id}: {exc}") from None
        clean = None
        if with_clean and rec.clean_path is not None:
            try:
                clean = read_wav(rec.clean_path, rec.sample_rate)
            except (OSError, EOFError, ValueError) as exc:
                raise DataError(f"{rec.utt_id}: cannot read {rec.clean_path}: {exc}") from None
        out.append(Utterance(rec.utt_id, wave, labels, rec.source_tag, clean))
    return out
