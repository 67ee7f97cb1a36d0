"""Configuration records and named presets.

``desk`` is the small default, ``toy`` the tiny setting used by the synthetic
corpus, and ``paper-chime4`` holds the full-size CHiME-4 architecture.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    fft_size: int = 512
    frame_shift: int = 160
    n_mels: int = 40
    subsample: int = 3
    delta_window: int = 2

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def feat_dim(self) -> int:
        return 3 * self.n_mels


@dataclass
class MaskNetConfig:
    layers: int = 1
    hidden: int = 32
    bidirectional: bool = True
    dropout: float = 0.5
    # "magnitude" feeds |X| as is; "log" feeds log(|X| + 1e-3)
    input_transform: str = "magnitude"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("mask network needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_transform not in ("magnitude", "log"):
            raise ValueError(f"unknown input_transform {self.input_transform!r}")


@dataclass
class FrontendConfig:
    masknet: MaskNetConfig = field(default_factory=MaskNetConfig)
    ref_mode: str = "fixed"  # "fixed" or "pca"
    ref_index: int = 0
    conjugate: bool = True
    loading: float = 1e-6


@dataclass
class AmConfig:
    conv_blocks: int = 1
    conv_channels: tuple[int, ...] = (32, 64)
    rnn_layers: int = 2
    hidden: int = 64
    bidirectional: bool = True
    vocab: int = 12
    dropout: float = 0.0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.vocab < 2:
            raise ValueError("vocab must include blank and at least one label")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.conv_blocks > len(self.conv_channels):
            raise ValueError("need one conv width per conv block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class WavAugmentConfig:
    gain_db: tuple[float, float] = (-6.0, 6.0)
    gain_p: float = 0.0
    speeds: tuple[float, ...] = (0.9, 1.0, 1.1)
    speed_p: float = 0.0
    snr_db: tuple[float, float] = (10.0, 30.0)
    noise_p: float = 0.0


@dataclass
class SpecAugmentConfig:
    n_time_masks: int = 0
    max_time_width: int = 0
    n_freq_masks: int = 0
    max_freq_width: int = 0


@dataclass
class AugmentPolicy:
    wav: WavAugmentConfig = field(default_factory=WavAugmentConfig)
    spec: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        for name in ("gain_p", "speed_p", "noise_p"):
            p = getattr(self.wav, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        for name in ("n_time_masks", "max_time_width", "n_freq_masks", "max_freq_width"):
            if getattr(self.spec, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def enabled(self) -> bool:
        w, s = self.wav, self.spec
        return any((w.gain_p, w.speed_p, w.noise_p, s.n_time_masks, s.n_freq_masks))


SCHEDULING_MODES = ("none", "shared_optimizer", "separate_optimizers")


@dataclass
class TrainConfig:
    skip_p: float = 0.5
    clip_norm: float | None = 5.0
    scheduling_mode: str = "shared_optimizer"
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    early_stop: int = 5
    loss: str = "crf"  # "crf" or "ctc"
    lm_order: int = 2
    lm_smoothing: float = 0.5
    freeze_frontend: bool = False

    def __post_init__(self):
        if not 0.0 <= self.skip_p <= 1.0:
            raise ValueError(f"skip_p must be in [0, 1], got {self.skip_p}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or null to disable)")
        if self.scheduling_mode not in SCHEDULING_MODES:
            raise ValueError(f"scheduling_mode must be one of {SCHEDULING_MODES}")
        if self.loss not in ("crf", "ctc"):
            raise ValueError(f"loss must be 'crf' or 'ctc', got {self.loss!r}")


@dataclass
class ExperimentConfig:
    name: str = "desk"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    am: AmConfig = field(default_factory=AmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    units: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: dict | None):
    data = dict(data or {})
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data.pop(f.name)
        sub = f.type if not isinstance(f.type, str) else _SUBTYPES.get(f.type)
        if sub is not None and dataclasses.is_dataclass(sub):
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    if data:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(data)}")
    return cls(**kwargs)


_SUBTYPES = {
    "FeatureConfig": FeatureConfig,
    "MaskNetConfig": MaskNetConfig,
    "FrontendConfig": FrontendConfig,
    "AmConfig": AmConfig,
    "TrainConfig": TrainConfig,
    "WavAugmentConfig": WavAugmentConfig,
    "SpecAugmentConfig": SpecAugmentConfig,
    "AugmentPolicy": AugmentPolicy,
}


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    base = data.pop("preset", None)
    if base is None:
        return _build(ExperimentConfig, data)
    merged = _merge(preset(base).to_dict(), data)
    return _build(ExperimentConfig, merged)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) config; ``preset: <name>`` starts from a named preset."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(cfg.to_dict()), fh, sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def preset(name: str) -> ExperimentConfig:
    if name == "desk":
        return ExperimentConfig(name="desk")
    if name == "paper-chime4":
        return ExperimentConfig(
            name="paper-chime4",
            features=FeatureConfig(n_mels=40, subsample=3),
            frontend=FrontendConfig(masknet=MaskNetConfig(layers=3, hidden=320, dropout=0.5)),
            am=AmConfig(conv_blocks=2, conv_channels=(32, 64), rnn_layers=6, hidden=320, dropout=0.5),
            train=TrainConfig(skip_p=0.5),
        )
    if name == "toy":
        return ExperimentConfig(
            name="toy",
            features=FeatureConfig(sample_rate=8000, fft_size=128, frame_shift=64, n_mels=20, subsample=3),
            frontend=FrontendConfig(masknet=MaskNetConfig(layers=1, hidden=16, dropout=0.0)),
            am=AmConfig(conv_blocks=0, rnn_layers=1, hidden=32, vocab=7, dropout=0.0),
            train=TrainConfig(epochs=15, batch_size=8, lr=3e-3),
        )
    raise ValueError(f"unknown preset {name!r} (known: desk, paper-chime4, toy)")
