"""Batched complex linear solve by Gauss-Jordan elimination.

The elimination is written with differentiable primitives only, so the
gradient of the solution comes from the tape instead of a custom adjoint.
Pivot order is chosen on the forward values (largest modulus, lowest row
on ties) and then held fixed, which makes the row swaps constant
permutation matrices.
"""
from __future__ import annotations

import numpy as np

from . import complex as cx
from .complex import ComplexTensor
from .tensor import ShapeError

PIVOT_FLOOR = 1e-12
MAX_DIM = 16


class SingularMatrixError(ArithmeticError):
    """A pivot fell below the floor; ``index`` locates the batch entry."""

    def __init__(self, index: tuple[int, ...], modulus: float):
        self.index = tuple(int(i) for i in index)
        self.modulus = modulus
        where = f" at frequency {self.frequency}" if self.index else ""
        super().__init__(f"singular matrix{where} (pivot modulus {modulus:.3g}, batch index {self.index})")

    @property
    def frequency(self) -> int | None:
        # batched PSDs are laid out (..., F, C, C), so the innermost batch axis is frequency
        return self.index[-1] if self.index else None


def complex_linear_solve(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Solve ``a @ z = b`` for z; a is (..., C, C), b is (..., C, K)."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("complex_linear_solve", a.shape, b.shape, detail="A must be square")
    n = a.shape[-1]
    if n > MAX_DIM:
        raise ShapeError("complex_linear_solve", a.shape, detail=f"C > {MAX_DIM}")
    if b.ndim != a.ndim or b.shape[:-1] != a.shape[:-1]:
        raise ShapeError("complex_linear_solve", a.shape, b.shape)

    m = cx.concat([a, b], axis=-1)
    batch = a.shape[:-2]
    for k in range(n):
        mod = np.abs(m.re.data[..., k:, k] + 1j * m.im.data[..., k:, k])
        best = k + np.argmax(mod, axis=-1)
        if np.any(best != k):
            eye = np.eye(n)
            perm = np.broadcast_to(eye, batch + (n, n)).copy()
            perm[..., k, :] = eye[best]
            at = np.broadcast_to(best[..., None, None], batch + (1, n))
            np.put_along_axis(perm, at, np.broadcast_to(eye[k], batch + (1, n)), axis=-2)
            m = cx.apply_real(perm, m)
        pivot = m[..., k, k]
        pmod = np.abs(pivot.re.data + 1j * pivot.im.data)
        if np.any(pmod < PIVOT_FLOOR):
            bad = np.unravel_index(int(np.argmin(pmod)), pmod.shape) if pmod.ndim else ()
            raise SingularMatrixError(bad, float(np.min(pmod)))
        row = cx.divide(m[..., k, :], pivot.reshape(pivot.shape + (1,)))
        others = np.ones(n)
        others[k] = 0.0
        col = cx.scale(m[..., :, k], others)
        m = cx.sub(m, cx.mul(col.reshape(col.shape + (1,)), row.reshape(row.shape[:-1] + (1, row.shape[-1]))))
        keep = others.reshape(n, 1)
        onehot = (1.0 - others).reshape(n, 1)
        m = cx.add(cx.scale(m, keep), cx.scale(row.reshape(row.shape[:-1] + (1, row.shape[-1])), onehot))
    return m[..., :, n:]
