"""Acoustic model: VGG-style conv blocks, recurrent layers, per-frame log-softmax."""
from __future__ import annotations

import numpy as np

from .autodiff import ComplexTensor, Tensor
from .autodiff import tensor as T
from .config import AmConfig
from .nn import Params, conv3x3, dropout, init_conv, init_linear, init_rnn_stack, maxpool_freq, rnn_stack
from .signal.stft import ComplexSpectrogram

PREFIX = "am"
# share of the output mass given to blank at initialization
BLANK_PRIOR = 0.9


def _conv_out_bins(n_mels: int, blocks: int) -> int:
    for _ in range(blocks):
        n_mels = n_mels // 2 if n_mels >= 2 else n_mels
    return n_mels


def init_am(rng: np.random.Generator, feat_dim: int, cfg: AmConfig) -> Params:
    params: Params = {}
    if cfg.conv_blocks:
        if feat_dim % 3:
            raise ValueError("conv front of the AM expects [statics, deltas, delta-deltas] features")
        c_in, n_mels = 3, feat_dim // 3
        for i in range(cfg.conv_blocks):
            width = cfg.conv_channels[i]
            params.update(init_conv(rng, f"{PREFIX}.conv{i}.a", c_in, width))
            params.update(init_conv(rng, f"{PREFIX}.conv{i}.b", width, width))
            c_in = width
        rnn_in = _conv_out_bins(n_mels, cfg.conv_blocks) * c_in
    else:
        rnn_in = feat_dim
    if cfg.rnn_layers:
        params.update(init_rnn_stack(rng, f"{PREFIX}.rnn", 1, rnn_in, cfg.hidden, cfg.rnn_layers, cfg.bidirectional))
        out_in = cfg.hidden * (2 if cfg.bidirectional else 1)
    else:
        out_in = rnn_in
    params.update(init_linear(rng, f"{PREFIX}.out", out_in, cfg.vocab))
    # an untrained model then emits mostly blanks, so its hypotheses err by deletion
    params[f"{PREFIX}.out.b"][0] = np.log(BLANK_PRIOR * (cfg.vocab - 1) / (1.0 - BLANK_PRIOR))
    return params


def am_forward(
    feats: Tensor,
    params: dict[str, Tensor],
    cfg: AmConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Log-probabilities (B, T', V) for features (B, T', D); a 2-D input gets a batch axis of 1."""
    squeeze = feats.ndim == 2
    if squeeze:
        feats = feats.reshape((1,) + feats.shape)
    bsz, steps, dim = feats.shape
    if steps == 0:
        raise ValueError("am_forward: empty feature sequence")
    x = feats
    if cfg.conv_blocks:
        x = x.reshape(bsz, steps, 3, dim // 3).transpose(0, 1, 3, 2)  # (B, T, mel, 3)
        for i in range(cfg.conv_blocks):
            x = T.relu(conv3x3(x, params[f"{PREFIX}.conv{i}.a.w"], params[f"{PREFIX}.conv{i}.a.b"]))
            x = T.relu(conv3x3(x, params[f"{PREFIX}.conv{i}.b.w"], params[f"{PREFIX}.conv{i}.b.b"]))
            x = maxpool_freq(x)
        x = x.reshape(bsz, steps, x.shape[2] * x.shape[3])
    if cfg.rnn_layers:
        if params[f"{PREFIX}.rnn.l0.fw.wx"].shape[-2] != x.shape[-1]:
            raise ValueError(f"AM expects input dim {params[f'{PREFIX}.rnn.l0.fw.wx'].shape[-2]}, got {x.shape[-1]}")
        x = rnn_stack(x.reshape((1,) + x.shape), params, f"{PREFIX}.rnn", cfg.rnn_layers, cfg.bidirectional, cfg.dropout, rng, train)
        x = x.reshape(x.shape[1:])
    w, b = params[f"{PREFIX}.out.w"], params[f"{PREFIX}.out.b"]
    if w.shape[0] != x.shape[-1]:
        raise ValueError(f"AM output layer expects dim {w.shape[0]}, got {x.shape[-1]}")
    logits = (x.reshape(bsz * steps, x.shape[-1]) @ w + b).reshape(bsz, steps, cfg.vocab)
    logp = T.log_softmax(logits, axis=-1)
    return logp.reshape(logp.shape[1:]) if squeeze else logp


def pick_channel(spec, rng: np.random.Generator) -> ComplexTensor:
    """Uniformly chosen single channel, (..., T, F, C) -> (..., T, F)."""
    x = spec.coeffs if isinstance(spec, ComplexSpectrogram) else spec
    c = int(rng.integers(x.shape[-1]))
    return x[..., c]
