"""Mask-based MVDR neural beamformer.

Shapes follow the STFT layout with optional leading batch axes:
``x`` is (..., T, F, C), masks (..., T, F, C) per channel or (..., T, F)
once condensed, PSD matrices (..., F, C, C) and filters (..., F, C).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ComplexTensor, Tensor, complex_linear_solve
from .autodiff import complex as cx
from .autodiff import tensor as T
from .config import FrontendConfig, MaskNetConfig
from .nn import Params, init_linear, init_rnn_stack, rnn_stack
from .signal.stft import ComplexSpectrogram, magnitude

log = logging.getLogger(__name__)

MASK_SUM_FLOOR = 1e-8
TRACE_FLOOR = 1e-10
PREFIX = "fe"


class DegenerateStatisticsError(ArithmeticError):
    def __init__(self, frequency: int, value: float):
        self.frequency = int(frequency)
        super().__init__(f"degenerate PSD statistics at frequency {frequency}: |tr G| = {value:.3g}")


@dataclass
class MaskPair:
    speech: Tensor
    noise: Tensor


@dataclass
class PsdPair:
    phi_ss: ComplexTensor
    phi_nn: ComplexTensor


def _coeffs(spec) -> ComplexTensor:
    return spec.coeffs if isinstance(spec, ComplexSpectrogram) else spec


# -- mask estimation -----------------------------------------------------
def init_masknet(rng: np.random.Generator, n_bins: int, cfg: MaskNetConfig) -> Params:
    """Speech and noise estimators, stacked on a group axis of size 2 (no shared weights)."""
    params = init_rnn_stack(rng, f"{PREFIX}.rnn", 2, n_bins, cfg.hidden, cfg.layers, cfg.bidirectional)
    out_dim = cfg.hidden * (2 if cfg.bidirectional else 1)
    params.update(init_linear(rng, f"{PREFIX}.head", out_dim, n_bins, groups=2))
    return params


def estimate_masks(
    spec,
    params: dict[str, Tensor],
    cfg: MaskNetConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> MaskPair:
    x = _coeffs(spec)
    lead = x.shape[:-3]
    steps, n_bins, chans = x.shape[-3:]
    head = params[f"{PREFIX}.head.w"]
    if head.shape[-1] != n_bins:
        raise ValueError(f"mask network was built for {head.shape[-1]} bins, input has {n_bins}")
    mag = magnitude(x)
    if cfg.input_transform == "log":
        mag = T.log(mag + 1e-3)
    n = int(np.prod(lead, dtype=int)) * chans
    # channels become independent sequences through the shared weights
    perm = tuple(range(len(lead))) + (len(lead) + 2, len(lead), len(lead) + 1)
    seqs = mag.transpose(perm).reshape(1, n, steps, n_bins)
    z = rnn_stack(seqs, params, f"{PREFIX}.rnn", cfg.layers, cfg.bidirectional, cfg.dropout, rng, train)
    d = z.shape[-1]
    logits = (z.reshape(2, n * steps, d) @ head).reshape(2, n, steps, n_bins)
    logits = logits + params[f"{PREFIX}.head.b"].reshape(2, 1, 1, n_bins)
    masks = T.sigmoid(logits).reshape((2,) + lead + (chans, steps, n_bins))
    k = len(lead)
    back = (0,) + tuple(range(1, k + 1)) + (k + 2, k + 3, k + 1)
    masks = masks.transpose(back)  # (2, ..., T, F, C)
    return MaskPair(masks[0], masks[1])


def condense_masks(m: MaskPair) -> tuple[Tensor, Tensor]:
    return m.speech.mean(axis=-1), m.noise.mean(axis=-1)


# -- statistics and filter -----------------------------------------------
def estimate_psd(spec, m_s: Tensor, m_n: Tensor) -> PsdPair:
    x = _coeffs(spec)
    xx = cx.outer(x)  # (..., T, F, C, C)
    return PsdPair(_weighted_psd(xx, m_s), _weighted_psd(xx, m_n))


def _weighted_psd(xx: ComplexTensor, m: Tensor) -> ComplexTensor:
    w = m.reshape(m.shape + (1, 1))
    acc = cx.scale(xx, w).sum(axis=-4)
    den = T.maximum(m.sum(axis=-2), MASK_SUM_FLOOR)
    den = den.reshape(den.shape + (1, 1))
    return ComplexTensor(acc.re / den, acc.im / den)


def mvdr_filter(psd: PsdPair, u, loading: float = 1e-6) -> ComplexTensor:
    """h(f) = (Phi_NN^-1 Phi_SS / tr(Phi_NN^-1 Phi_SS)) u, with diagonal loading on Phi_NN."""
    phi_ss, phi_nn = psd.phi_ss, psd.phi_nn
    chans = phi_nn.shape[-1]
    u = np.asarray(u, dtype=float)
    eye = np.eye(chans)
    mean_diag = cx.trace(phi_nn).re / float(chans)
    load = (mean_diag * loading).reshape(mean_diag.shape + (1, 1)) * eye
    phi_nn = ComplexTensor(phi_nn.re + load, phi_nn.im)
    g = complex_linear_solve(phi_nn, phi_ss)
    tr = cx.trace(g)
    mod = np.abs(tr.re.data + 1j * tr.im.data)
    if np.any(mod < TRACE_FLOOR):
        idx = np.unravel_index(int(np.argmin(mod)), mod.shape)
        raise DegenerateStatisticsError(idx[-1], float(mod.min()))
    sel = u.reshape(u.shape[:-1] + (1,) * (g.ndim - u.ndim) + (chans,)) if u.ndim > 1 else u
    gu = cx.scale(g, sel).sum(axis=-1)  # (..., F, C)
    tr = tr.reshape(tr.shape + (1,))
    return cx.divide(gu, tr)


def apply_beamformer(spec, h: ComplexTensor, conjugate: bool = True) -> ComplexTensor:
    """x_hat(t, f) = sum_c conj(h(f, c)) x(t, f, c); ``conjugate=False`` drops the conjugation."""
    x = _coeffs(spec)
    if x.shape[-1] != h.shape[-1]:
        raise ValueError(f"filter has {h.shape[-1]} channels, spectrogram has {x.shape[-1]}")
    w = cx.conj(h) if conjugate else h
    w = w.reshape(w.shape[:-2] + (1,) + w.shape[-2:])
    return cx.mul(x, w).sum(axis=-1)


def select_reference(psd: PsdPair, mode: str = "fixed", index: int = 0, iters: int = 50, tol: float = 1e-10) -> np.ndarray:
    """One-hot reference vector(s), shape (..., C); never differentiated."""
    phi = psd.phi_ss.numpy()
    chans = phi.shape[-1]
    lead = phi.shape[:-3]
    if mode == "fixed":
        if not 0 <= index < chans:
            raise ValueError(f"reference index {index} out of range for {chans} channels")
        u = np.zeros(lead + (chans,))
        u[..., index] = 1.0
        return u
    if mode != "pca":
        raise ValueError(f"unknown reference mode {mode!r}")
    vec, ok = _power_iteration(phi, iters, tol)
    if not ok:
        warnings.warn("power iteration did not converge; using reference channel 0", RuntimeWarning)
        return select_reference(psd, "fixed", 0)
    score = (np.abs(vec) ** 2).mean(axis=-2)  # average over frequency
    u = np.zeros(lead + (chans,))
    np.put_along_axis(u, np.argmax(score, axis=-1)[..., None], 1.0, axis=-1)
    return u


def _power_iteration(phi: np.ndarray, iters: int, tol: float) -> tuple[np.ndarray, bool]:
    chans = phi.shape[-1]
    v = np.ones(phi.shape[:-1], dtype=complex) / np.sqrt(chans)
    for _ in range(iters):
        w = np.einsum("...ij,...j->...i", phi, v)
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        w = np.where(norm > 0, w / np.where(norm > 0, norm, 1.0), v)
        # fix the global phase so successive iterates are comparable
        big = np.take_along_axis(w, np.argmax(np.abs(w), axis=-1)[..., None], axis=-1)
        w = w * np.conj(big) / np.maximum(np.abs(big), 1e-300)
        if np.max(np.abs(w - v)) < tol:
            return w, True
        v = w
    # slow convergence happens when the top two eigenvalues nearly tie; accept a
    # stationary Rayleigh quotient as converged
    lam = np.einsum("...i,...ij,...j->...", np.conj(v), phi, v).real
    w = np.einsum("...ij,...j->...i", phi, v)
    resid = np.linalg.norm(w - lam[..., None] * v, axis=-1)
    scale = np.maximum(np.abs(lam), 1e-300)
    return v, bool(np.all(resid / scale < 1e-6))


# -- composite -----------------------------------------------------------
@dataclass
class BeamformOutput:
    enhanced: ComplexTensor
    masks: MaskPair
    psd: PsdPair
    weights: ComplexTensor
    ref: np.ndarray


def beamform(
    spec,
    params: dict[str, Tensor],
    cfg: FrontendConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> BeamformOutput:
    x = _coeffs(spec)
    masks = estimate_masks(x, params, cfg.masknet, rng, train)
    m_s, m_n = condense_masks(masks)
    psd = estimate_psd(x, m_s, m_n)
    u = select_reference(psd, cfg.ref_mode, cfg.ref_index)
    h = mvdr_filter(psd, u, cfg.loading)
    return BeamformOutput(apply_beamformer(x, h, cfg.conjugate), masks, psd, h, u)


def oracle_masks(noisy: np.ndarray, clean: np.ndarray, floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Condensed ideal binary masks from parallel spectra (..., T, F, C).

    Speech is 1 where |clean|^2 > |noisy - clean|^2. Masks are kept inside
    [floor, 1 - floor] so bins where one source is absent everywhere still
    give non-zero statistics.
    """
    if noisy.shape != clean.shape:
        raise ValueError(f"clean/noisy spectra differ in shape: {clean.shape} vs {noisy.shape}")
    ibm = (np.abs(clean) ** 2 > np.abs(noisy - clean) ** 2).mean(axis=-1)
    m_s = np.clip(ibm, floor, 1.0 - floor)
    return m_s, 1.0 - m_s


def beamform_with_masks(spec, m_s, m_n, cfg: FrontendConfig | None = None) -> BeamformOutput:
    """MVDR with externally supplied condensed masks (e.g. oracle masks)."""
    cfg = cfg or FrontendConfig()
    x = _coeffs(spec)
    m_s, m_n = T.as_tensor(m_s), T.as_tensor(m_n)
    psd = estimate_psd(x, m_s, m_n)
    u = select_reference(psd, cfg.ref_mode, cfg.ref_index)
    h = mvdr_filter(psd, u, cfg.loading)
    return BeamformOutput(apply_beamformer(x, h, cfg.conjugate), MaskPair(m_s, m_n), psd, h, u)
