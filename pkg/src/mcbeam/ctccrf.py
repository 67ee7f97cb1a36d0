"""CTC and CTC-CRF sequence losses, label n-gram LM, greedy decoding, scoring.

Label ids: 0 is blank, 1..V-1 are real labels. Inside the LM tables id 0
doubles as the sentence boundary (``<s>`` as a context, ``</s>`` as an
outcome), since blank never appears in a label sequence.

Both forward recursions run in log space on the autodiff graph, so the
loss gradients come from the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import tensor as T

BLANK = 0
BLANK_SYMBOL = "<blk>"
NEG = -1e30  # finite stand-in for log(0), keeps log-sum-exp free of inf - inf


class InfeasibleAlignmentError(ValueError):
    pass


# -- collapsing map -------------------------------------------------------
def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge repeated symbols, then drop blanks."""
    out: list[int] = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest path length that collapses to ``labels`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(labels[:-1], labels[1:]) if a == b)
    return len(labels) + repeats


def _as_batch(logp: Tensor, labels):
    if logp.ndim == 2:
        return logp.reshape((1,) + logp.shape), [list(labels)], True
    return logp, [list(l) for l in labels], False


def _check_labels(labels: list[list[int]], steps: int, vocab: int) -> None:
    for i, l in enumerate(labels):
        if not l:
            raise ValueError(f"utterance {i}: empty label sequence")
        if any(not 0 < x < vocab for x in l):
            raise ValueError(f"utterance {i}: labels must be in 1..{vocab - 1}")
        if min_frames(l) > steps:
            raise InfeasibleAlignmentError(
                f"utterance {i}: {len(l)} labels need {min_frames(l)} frames, only {steps} available"
            )


# -- CTC numerator ---------------------------------------------------------
def ctc_log_likelihood(logp: Tensor, labels) -> Tensor:
    """log sum over B^-1(l) of prod_t p(pi_t | x); (B, T, V) -> (B,)."""
    logp, labels, squeeze = _as_batch(logp, labels)
    bsz, steps, vocab = logp.shape
    _check_labels(labels, steps, vocab)
    lmax = max(len(l) for l in labels)
    n_states = 2 * lmax + 1
    ext = np.zeros((bsz, n_states), dtype=int)
    skip = np.full((bsz, n_states), NEG)
    final = np.full((bsz, n_states), NEG)
    for b, l in enumerate(labels):
        ext[b, 1 : 2 * len(l) : 2] = l
        for k in range(1, len(l)):
            if l[k] != l[k - 1]:
                skip[b, 2 * k + 1] = 0.0
        final[b, 2 * len(l)] = 0.0
        final[b, 2 * len(l) - 1] = 0.0
    emis = logp[np.arange(bsz)[:, None, None], np.arange(steps)[None, :, None], ext[:, None, :]]
    init = np.full(n_states, NEG)
    init[: min(2, n_states)] = 0.0
    alpha = emis[:, 0, :] + init
    neg1 = np.full((bsz, 1), NEG)
    neg2 = np.full((bsz, 2), NEG)
    for t in range(1, steps):
        a1 = T.concat([neg1, alpha[:, :-1]], axis=1)
        a2 = T.concat([neg2, alpha[:, :-2]], axis=1) + skip
        alpha = T.logsumexp(T.stack([alpha, a1, a2], axis=-1), axis=-1) + emis[:, t, :]
    ll = T.logsumexp(alpha + final, axis=-1)
    return ll.reshape(()) if squeeze else ll


def ctc_loss(logp: Tensor, labels, reduction: str = "mean") -> Tensor:
    nll = -ctc_log_likelihood(logp, labels)
    return _reduce(nll, reduction)


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return x.mean() if x.ndim else x
    if reduction == "sum":
        return x.sum() if x.ndim else x
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


# -- label LM --------------------------------------------------------------
@dataclass
class LabelLm:
    """Label n-gram LM as a dense table ``logp[context, outcome]`` of shape (V, V).

    Row 0 is the ``<s>`` context, column 0 the ``</s>`` outcome; ``<s> -> </s>``
    has zero probability, so the LM is a distribution over non-empty sequences.
    ``order=0`` is the flat edge potential (log p(l) = 0 for every l,
    including the empty one), under which CTC-CRF reduces to CTC.
    """

    order: int
    vocab: int
    table: np.ndarray

    @classmethod
    def train(cls, transcripts: Sequence[Sequence[int]], vocab: int, order: int = 2, k: float = 0.5) -> LabelLm:
        if order not in (1, 2):
            raise ValueError("label LM order must be 1 or 2")
        if k <= 0:
            raise ValueError("add-k smoothing needs k > 0")
        if order == 1:
            counts = np.full(vocab, k)
            for l in transcripts:
                for x in l:
                    counts[x] += 1
                counts[0] += 1  # one </s> per sentence
            return cls.from_unigram(counts / counts.sum())
        counts = np.full((vocab, vocab), k)
        counts[0, 0] = 0.0
        for l in transcripts:
            seq = [0] + list(l) + [0]
            for a, b in zip(seq[:-1], seq[1:]):
                counts[a, b] += 1
        probs = counts / counts.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            return cls(2, vocab, np.log(probs))

    @classmethod
    def from_unigram(cls, probs: np.ndarray) -> LabelLm:
        probs = np.asarray(probs, dtype=float)
        vocab = probs.shape[0]
        table = np.tile(probs, (vocab, 1))
        first = probs.copy()
        first[0] = 0.0
        table[0] = first / first.sum()
        with np.errstate(divide="ignore"):
            return cls(1, vocab, np.log(table))

    @classmethod
    def uniform(cls, vocab: int) -> LabelLm:
        """Uniform unigram over the V-1 labels and ``</s>``."""
        return cls.from_unigram(np.full(vocab, 1.0 / vocab))

    @classmethod
    def flat(cls, vocab: int) -> LabelLm:
        return cls(0, vocab, np.zeros((vocab, vocab)))

    def score(self, labels: Sequence[int]) -> float:
        if len(labels) == 0:
            raise ValueError("label LM query on an empty transcript")
        if self.order == 0:
            return 0.0
        seq = [0] + [int(x) for x in labels] + [0]
        return float(sum(self.table[a, b] for a, b in zip(seq[:-1], seq[1:])))

    def check_normalized(self, tol: float = 1e-10) -> bool:
        if self.order == 0:
            return True
        return bool(np.all(np.abs(np.exp(self.table).sum(axis=1) - 1.0) < tol))


# -- denominator graph ---------------------------------------------------------
@dataclass
class DenominatorGraph:
    """CTC topology composed with the label LM, as dense log-weight arrays.

    A path occupies one state per frame and emits that state's symbol.
    ``init[s]`` scores entering s at frame 0, ``trans[i, j]`` the move i -> j,
    ``final[s]`` ending in s; NEG marks a missing arc.
    """

    symbols: np.ndarray
    init: np.ndarray
    trans: np.ndarray
    final: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.symbols)

    def arcs(self) -> list[tuple[int, int, int, float]]:
        """(from, to, emitted symbol, weight) for every present arc."""
        src, dst = np.nonzero(self.trans > NEG / 2)
        return [(int(i), int(j), int(self.symbols[j]), float(self.trans[i, j])) for i, j in zip(src, dst)]


def _w(x: float) -> float:
    return float(x) if np.isfinite(x) else NEG


def build_denominator(lm: LabelLm) -> DenominatorGraph:
    v = lm.vocab
    labels = range(1, v)
    tab = lm.table
    if lm.order == 0:
        # blank state 0, label states 1..V-1; everything final, all weights 0
        n = v
        symbols = np.arange(v)
        init = np.zeros(n)
        trans = np.zeros((n, n))
        final = np.zeros(n)
        return DenominatorGraph(symbols, init, trans, final)
    if lm.order == 1:
        # 0: blank before any label, 1..V-1: label states, V: blank after a label
        n = v + 1
        symbols = np.array([0] + list(labels) + [0])
        init = np.full(n, NEG)
        trans = np.full((n, n), NEG)
        final = np.full(n, NEG)
        after = v
        init[0] = 0.0
        trans[0, 0] = 0.0
        for a in labels:
            init[a] = _w(tab[0, a])
            trans[0, a] = _w(tab[0, a])
            trans[a, a] = 0.0
            trans[a, after] = 0.0
            trans[after, a] = _w(tab[1, a])
            for b in labels:
                if b != a:
                    trans[a, b] = _w(tab[1, b])
            final[a] = _w(tab[1, 0])
        trans[after, after] = 0.0
        final[after] = _w(tab[1, 0])
        return DenominatorGraph(symbols, init, trans, final)
    # bigram: 0 start blank, a = label a, V-1+a = blank after label a
    n = 2 * v - 1
    symbols = np.array([0] + list(labels) + [0] * (v - 1))
    init = np.full(n, NEG)
    trans = np.full((n, n), NEG)
    final = np.full(n, NEG)
    init[0] = 0.0
    trans[0, 0] = 0.0
    final[0] = _w(tab[0, 0])
    for a in labels:
        blank_a = v - 1 + a
        init[a] = _w(tab[0, a])
        trans[0, a] = _w(tab[0, a])
        trans[a, a] = 0.0
        trans[a, blank_a] = 0.0
        trans[blank_a, blank_a] = 0.0
        for b in labels:
            trans[blank_a, b] = _w(tab[a, b])
            if b != a:
                trans[a, b] = _w(tab[a, b])
        final[a] = final[blank_a] = _w(tab[a, 0])
    return DenominatorGraph(symbols, init, trans, final)


def denominator_log_score(logp: Tensor, den: DenominatorGraph) -> Tensor:
    """log sum over all paths of exp(sum_t logp(pi_t) + log p_lm(B(pi))); (B, T, V) -> (B,)."""
    squeeze = logp.ndim == 2
    if squeeze:
        logp = logp.reshape((1,) + logp.shape)
    steps = logp.shape[1]
    emis = logp[:, :, den.symbols]  # (B, T, S)
    alpha = emis[:, 0, :] + den.init
    trans_t = den.trans.T  # [to, from]
    for t in range(1, steps):
        scores = alpha.reshape(alpha.shape[0], 1, alpha.shape[1]) + trans_t
        alpha = T.logsumexp(scores, axis=-1) + emis[:, t, :]
    out = T.logsumexp(alpha + den.final, axis=-1)
    return out.reshape(()) if squeeze else out


def crf_loss(logp: Tensor, labels, lm: LabelLm, den: DenominatorGraph | None = None, reduction: str = "mean") -> Tensor:
    """-log [sum_{B^-1(l)} exp(phi)] / [sum_all exp(phi)], phi = log p_lm(B(pi)) + sum_t log p(pi_t|x)."""
    den = build_denominator(lm) if den is None else den
    batch, labels_b, squeeze = _as_batch(logp, labels)
    num = ctc_log_likelihood(batch, labels_b) + np.array([lm.score(l) for l in labels_b])
    nll = denominator_log_score(batch, den) - num
    if squeeze:
        nll = nll.reshape(())
    return _reduce(nll, reduction)


def sequence_loss(kind: str, logp: Tensor, labels, lm: LabelLm | None = None, den: DenominatorGraph | None = None) -> Tensor:
    if kind == "ctc":
        return ctc_loss(logp, labels)
    if kind == "crf":
        if lm is None:
            raise ValueError("crf loss needs a label LM")
        return crf_loss(logp, labels, lm, den)
    raise ValueError(f"unknown loss {kind!r}")


# -- decoding and scoring --------------------------------------------------
def greedy_decode(logp) -> list[int]:
    """Best path per frame (ties -> lowest index), collapsed."""
    x = logp.data if isinstance(logp, Tensor) else np.asarray(logp)
    return collapse(np.argmax(x, axis=-1))


@dataclass(frozen=True)
class EditStats:
    distance: int
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            raise ZeroDivisionError("error rate undefined for an empty reference")
        return self.distance / self.ref_len

    def __add__(self, other: EditStats) -> EditStats:
        return EditStats(
            self.distance + other.distance,
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def edit_distance(hyp: Sequence, ref: Sequence) -> EditStats:
    """Unit-cost Levenshtein alignment with its substitution/insertion/deletion split."""
    n, m = len(hyp), len(ref)
    # (cost, subs, ins, dels) per cell; ties prefer substitution, then deletion, then insertion
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        row = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            p = prev[j - 1]
            diag = p if hyp[i - 1] == ref[j - 1] else (p[0] + 1, p[1] + 1, p[2], p[3])
            q = row[j - 1]
            dele = (q[0] + 1, q[1], q[2], q[3] + 1)
            r = prev[j]
            ins = (r[0] + 1, r[1], r[2] + 1, r[3])
            row.append(min((diag, dele, ins), key=lambda c: c[0]))
        prev = row
    c = prev[m]
    return EditStats(int(c[0]), int(c[1]), int(c[2]), int(c[3]), m)


def error_rate(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> EditStats:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    total = EditStats(0, 0, 0, 0, 0)
    for h, r in zip(hyps, refs):
        total = total + edit_distance(h, r)
    return total


# -- units file ------------------------------------------------------------------
def read_units(path: str | Path) -> list[str]:
    units = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not units or units[0] != BLANK_SYMBOL:
        raise ValueError(f"{path}: first unit must be {BLANK_SYMBOL}")
    if len(set(units)) != len(units):
        raise ValueError(f"{path}: duplicate units")
    return units


def write_units(path: str | Path, units: Sequence[str]) -> None:
    units = list(units)
    if not units or units[0] != BLANK_SYMBOL:
        units = [BLANK_SYMBOL] + [u for u in units if u != BLANK_SYMBOL]
    Path(path).write_text("\n".join(units) + "\n")


def encode(tokens: Sequence[str], units: Sequence[str]) -> list[int]:
    index = {u: i for i, u in enumerate(units) if i != BLANK}
    try:
        return [index[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"token {exc.args[0]!r} not in units") from None


def decode_tokens(ids: Sequence[int], units: Sequence[str]) -> list[str]:
    return [units[i] for i in ids]
