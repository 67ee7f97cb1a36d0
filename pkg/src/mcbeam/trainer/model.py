"""The joint model: parameters, label LM and the three training flows.

Flows:
  joint    multi-channel batch -> beamformer -> features -> AM -> loss
  channel  multi-channel batch -> one random channel -> features -> AM -> loss
  single   mono batch -> features -> AM -> loss
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import spec_augment
from ..autodiff import ComplexTensor, Tensor
from ..backend import PREFIX as AM_PREFIX
from ..backend import am_forward, init_am, pick_channel
from ..config import ExperimentConfig
from ..ctccrf import DenominatorGraph, LabelLm, build_denominator, sequence_loss
from ..frontend import PREFIX as FE_PREFIX
from ..frontend import beamform, estimate_masks, init_masknet
from ..nn import Params, constant, track
from ..signal.features import feature, mel_filterbank

FLOWS = ("joint", "channel", "single")


@dataclass
class FlowOutput:
    loss: Tensor
    logp: Tensor
    tracked: dict[str, Tensor]


class Model:
    def __init__(self, cfg: ExperimentConfig, params: Params, lm: LabelLm | None = None):
        self.cfg = cfg
        self.params = params
        self.lm = lm
        if cfg.train.loss == "crf" and lm is None:
            raise ValueError("crf loss needs a label LM")
        self.den: DenominatorGraph | None = build_denominator(lm) if lm is not None else None
        fc = cfg.features
        self.fbank = mel_filterbank(fc.fft_size, fc.sample_rate, fc.n_mels)

    @classmethod
    def create(cls, cfg: ExperimentConfig, seed: int, lm: LabelLm | None = None) -> Model:
        rng = np.random.default_rng([int(seed), 1])
        fc = cfg.features
        params = init_masknet(rng, fc.n_bins, cfg.frontend.masknet)
        params.update(init_am(rng, fc.feat_dim, cfg.am))
        return cls(cfg, params, lm)

    @property
    def frontend_names(self) -> list[str]:
        return sorted(k for k in self.params if k.startswith(FE_PREFIX + "."))

    @property
    def backend_names(self) -> list[str]:
        return sorted(k for k in self.params if k.startswith(AM_PREFIX + "."))

    def flow_names(self, flow: str) -> list[str]:
        """Parameters a flow updates."""
        if flow == "joint" and not self.cfg.train.freeze_frontend:
            return self.frontend_names + self.backend_names
        return self.backend_names

    # -- forward pieces --------------------------------------------------
    def _tensors(self, trainable: list[str]) -> dict[str, Tensor]:
        live = set(trainable)
        out = track(self.params, sorted(live))
        out.update(constant(self.params, [k for k in self.params if k not in live]))
        return out

    def features(self, s_hat: ComplexTensor, rng=None, train: bool = False) -> Tensor:
        fc = self.cfg.features
        hook = None
        spec = self.cfg.augment.spec
        if train and rng is not None and (spec.n_time_masks or spec.n_freq_masks):
            hook = lambda s: spec_augment(s, spec, rng)
        return feature(s_hat, self.fbank, fc.subsample, fc.delta_window, augment=hook).feats

    def enhance(self, x: ComplexTensor, tensors: dict[str, Tensor], rng=None, train: bool = False) -> ComplexTensor:
        return beamform(x, tensors, self.cfg.frontend, rng, train).enhanced

    def masks(self, x: ComplexTensor, tensors: dict[str, Tensor] | None = None, rng=None, train: bool = False):
        tensors = tensors or constant(self.params)
        return estimate_masks(x, tensors, self.cfg.frontend.masknet, rng, train)

    def log_probs(self, flow: str, spec: np.ndarray, tensors: dict[str, Tensor], rng=None, train: bool = False) -> Tensor:
        """AM log-probabilities (B, T', V) for a batch spectrum (B, T, F, C)."""
        x = ComplexTensor.from_numpy(spec)
        if flow == "joint":
            s_hat = self.enhance(x, tensors, rng, train)
        elif flow == "channel":
            s_hat = pick_channel(x, rng)
        elif flow == "single":
            if x.shape[-1] != 1:
                raise ValueError(f"single flow expects mono input, got {x.shape[-1]} channels")
            s_hat = x[..., 0]
        else:
            raise ValueError(f"unknown flow {flow!r}")
        feats = self.features(s_hat, rng, train)
        return am_forward(feats, tensors, self.cfg.am, rng, train)

    def loss(self, logp: Tensor, labels: list[list[int]]) -> Tensor:
        return sequence_loss(self.cfg.train.loss, logp, labels, self.lm, self.den)

    def run_flow(self, flow: str, spec: np.ndarray, labels: list[list[int]], rng=None, train: bool = True) -> FlowOutput:
        tensors = self._tensors(self.flow_names(flow) if train else [])
        logp = self.log_probs(flow, spec, tensors, rng, train)
        return FlowOutput(self.loss(logp, labels), logp, {k: t for k, t in tensors.items() if t.requires_grad})
