"""Layers on the autodiff core: LSTM recurrences, linear maps, 3x3 convolution.

Parameters live in flat ``{name: ndarray}`` dicts; a forward pass receives
the same names mapped to tracked :class:`Tensor` leaves. Recurrent weights
carry a leading group axis G so that several independent networks with the
same layout (the speech and noise mask estimators) run in one batched pass.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff import tensor as T

Params = dict[str, np.ndarray]


def track(params: Params, names=None) -> dict[str, Tensor]:
    """Wrap arrays as fresh gradient-tracked leaves (a new graph per evaluation)."""
    names = params.keys() if names is None else names
    return {k: Tensor(params[k], requires_grad=True, name=k) for k in names}


def constant(params: Params, names=None) -> dict[str, Tensor]:
    names = params.keys() if names is None else names
    return {k: Tensor(params[k], name=k) for k in names}


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng, prefix: str, groups: int, in_dim: int, hidden: int) -> Params:
    bound = 1.0 / np.sqrt(hidden)
    b = np.zeros((groups, 1, 4 * hidden))
    b[..., hidden : 2 * hidden] = 1.0  # forget-gate bias
    return {
        f"{prefix}.wx": _uniform(rng, bound, (groups, in_dim, 4 * hidden)),
        f"{prefix}.wh": _uniform(rng, bound, (groups, hidden, 4 * hidden)),
        f"{prefix}.b": b,
    }


def init_rnn_stack(rng, prefix: str, groups: int, in_dim: int, hidden: int, layers: int, bidirectional: bool) -> Params:
    params: Params = {}
    dim = in_dim
    for layer in range(layers):
        params.update(init_lstm(rng, f"{prefix}.l{layer}.fw", groups, dim, hidden))
        if bidirectional:
            params.update(init_lstm(rng, f"{prefix}.l{layer}.bw", groups, dim, hidden))
        dim = hidden * (2 if bidirectional else 1)
    return params


def lstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction. x: (G, N, T, D) -> (G, N, T, H); x may have G=1 against grouped weights."""
    _, n, steps, d = x.shape
    g = wx.shape[0]
    if wx.shape[-2] != d:
        raise ValueError(f"lstm input dim {d} does not match weights {wx.shape}")
    hidden = wh.shape[-2]
    four = 4 * hidden
    xw = (x.reshape(x.shape[0], n * steps, d) @ wx).reshape(g, n, steps, four) + b.reshape(g, 1, 1, four)
    xw = xw.transpose(2, 0, 1, 3)  # (T, G, N, 4H)
    h = c = None
    outs: list[Tensor] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = xw[t] if h is None else xw[t] + h @ wh
        gates = T.sigmoid(z[..., : 3 * hidden])
        i = gates[..., :hidden]
        f = gates[..., hidden : 2 * hidden]
        o = gates[..., 2 * hidden :]
        cand = T.tanh(z[..., 3 * hidden :])
        c = i * cand if c is None else f * c + i * cand
        h = o * T.tanh(c)
        outs[t] = h
    return T.stack(outs, axis=2)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def rnn_stack(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    layers: int,
    bidirectional: bool,
    p_drop: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    for layer in range(layers):
        node = f"{prefix}.l{layer}"
        fw = lstm(x, params[f"{node}.fw.wx"], params[f"{node}.fw.wh"], params[f"{node}.fw.b"])
        if bidirectional:
            bw = lstm(x, params[f"{node}.bw.wx"], params[f"{node}.bw.wh"], params[f"{node}.bw.b"], reverse=True)
            fw = T.concat([fw, bw], axis=-1)
        x = dropout(fw, p_drop, rng, train)
    return x


def init_linear(rng, prefix: str, in_dim: int, out_dim: int, groups: int | None = None) -> Params:
    bound = 1.0 / np.sqrt(in_dim)
    if groups is None:
        return {f"{prefix}.w": _uniform(rng, bound, (in_dim, out_dim)), f"{prefix}.b": np.zeros(out_dim)}
    return {
        f"{prefix}.w": _uniform(rng, bound, (groups, in_dim, out_dim)),
        f"{prefix}.b": np.zeros((groups, 1, out_dim)),
    }


def init_conv(rng, prefix: str, c_in: int, c_out: int) -> Params:
    bound = 1.0 / np.sqrt(9 * c_in)
    return {f"{prefix}.w": _uniform(rng, bound, (9 * c_in, c_out)), f"{prefix}.b": np.zeros(c_out)}


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 convolution, x: (B, T, F, Cin) -> (B, T, F, Cout)."""
    bsz, steps, freq, c_in = x.shape
    if w.shape[0] != 9 * c_in:
        raise ValueError(f"conv expects {w.shape[0] // 9} input channels, got {c_in}")
    zt = np.zeros((bsz, 1, freq, c_in))
    xp = T.concat([zt, x, zt], axis=1)
    zf = np.zeros((bsz, steps + 2, 1, c_in))
    xp = T.concat([zf, xp, zf], axis=2)
    patches = T.concat(
        [xp[:, dt : dt + steps, df : df + freq, :] for dt in range(3) for df in range(3)], axis=-1
    )
    out = patches.reshape(bsz * steps * freq, 9 * c_in) @ w + b
    return out.reshape(bsz, steps, freq, w.shape[1])


def maxpool_freq(x: Tensor) -> Tensor:
    """2x max-pool over axis 2 (frequency); an odd trailing bin is dropped."""
    half = x.shape[2] // 2
    if half == 0:
        return x
    a = x[:, :, 0 : 2 * half : 2, :]
    b = x[:, :, 1 : 2 * half : 2, :]
    return T.relu(a - b) + b
