"""Complex arithmetic as pairs of real tensors.

All complex ops are compositions of real primitives on ``(re, im)``, so the
real graph carries their gradients; no Wirtinger bookkeeping is needed
because every loss in the toolkit is real.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError("complex", self.re.shape, self.im.shape, detail="re/im differ")

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False) -> ComplexTensor:
        z = np.asarray(z)
        return cls(Tensor(z.real.copy(), requires_grad), Tensor(z.imag.copy(), requires_grad))

    @classmethod
    def real(cls, x) -> ComplexTensor:
        x = T.as_tensor(x)
        return cls(x, Tensor(np.zeros(x.shape)))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def ndim(self) -> int:
        return self.re.ndim

    def __getitem__(self, index) -> ComplexTensor:
        return ComplexTensor(self.re[index], self.im[index])

    def reshape(self, *shape) -> ComplexTensor:
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def transpose(self, *axes) -> ComplexTensor:
        return ComplexTensor(self.re.transpose(*axes), self.im.transpose(*axes))

    def sum(self, axis=None, keepdims: bool = False) -> ComplexTensor:
        return ComplexTensor(self.re.sum(axis, keepdims), self.im.sum(axis, keepdims))

    def mean(self, axis=None, keepdims: bool = False) -> ComplexTensor:
        return ComplexTensor(self.re.mean(axis, keepdims), self.im.mean(axis, keepdims))

    def __add__(self, other) -> ComplexTensor:
        return add(self, other)

    def __sub__(self, other) -> ComplexTensor:
        return sub(self, other)

    def __mul__(self, other) -> ComplexTensor:
        return mul(self, other)

    def __matmul__(self, other) -> ComplexTensor:
        return matmul(self, other)


def _lift(x) -> ComplexTensor:
    if isinstance(x, ComplexTensor):
        return x
    if isinstance(x, Tensor):
        return ComplexTensor.real(x)
    z = np.asarray(x)
    if np.iscomplexobj(z):
        return ComplexTensor.from_numpy(z)
    return ComplexTensor.real(Tensor(z))


def add(a, b) -> ComplexTensor:
    a, b = _lift(a), _lift(b)
    return ComplexTensor(a.re + b.re, a.im + b.im)


def sub(a, b) -> ComplexTensor:
    a, b = _lift(a), _lift(b)
    return ComplexTensor(a.re - b.re, a.im - b.im)


def mul(a, b) -> ComplexTensor:
    """Elementwise product with broadcasting."""
    a, b = _lift(a), _lift(b)
    return ComplexTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def scale(a: ComplexTensor, s) -> ComplexTensor:
    """Multiply by a real tensor or constant."""
    return ComplexTensor(a.re * s, a.im * s)


def conj(a: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(a.re, -a.im)


def abs2(a: ComplexTensor) -> Tensor:
    return a.re * a.re + a.im * a.im


def divide(a, b) -> ComplexTensor:
    """Elementwise a / b, computed as a * conj(b) / |b|^2."""
    a, b = _lift(a), _lift(b)
    den = abs2(b)
    num = mul(a, conj(b))
    return ComplexTensor(num.re / den, num.im / den)


def matmul(a, b) -> ComplexTensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("complex_matmul", a.shape, b.shape)
    return ComplexTensor(a.re @ b.re - a.im @ b.im, a.re @ b.im + a.im @ b.re)


def herm(a: ComplexTensor) -> ComplexTensor:
    """Conjugate transpose over the last two axes."""
    if a.ndim < 2:
        raise ShapeError("herm", a.shape)
    return ComplexTensor(T.swapaxes(a.re, -1, -2), -T.swapaxes(a.im, -1, -2))


def trace(a: ComplexTensor) -> ComplexTensor:
    """Trace over the last two (square) axes."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("trace", a.shape)
    n = a.shape[-1]
    eye = np.eye(n)
    return ComplexTensor((a.re * eye).sum(axis=(-2, -1)), (a.im * eye).sum(axis=(-2, -1)))


def outer(x: ComplexTensor, y: ComplexTensor | None = None) -> ComplexTensor:
    """x y^H over the last axis; ``outer(x)`` is x x^H."""
    y = x if y is None else y
    col = x.reshape(x.shape + (1,))
    row = conj(y).reshape(y.shape[:-1] + (1, y.shape[-1]))
    return mul(col, row)


def concat(items, axis: int = 0) -> ComplexTensor:
    items = [_lift(z) for z in items]
    return ComplexTensor(T.concat([z.re for z in items], axis), T.concat([z.im for z in items], axis))


def apply_real(m, z: ComplexTensor) -> ComplexTensor:
    """Left-multiply by a real (typically constant) matrix."""
    return ComplexTensor(T.matmul(m, z.re), T.matmul(m, z.im))
