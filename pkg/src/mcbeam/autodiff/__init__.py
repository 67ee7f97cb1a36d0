from .tensor import (
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    grad,
)
from .complex import ComplexTensor
from .linalg import SingularMatrixError, complex_linear_solve

__all__ = [
    "ComplexTensor",
    "DomainError",
    "ShapeError",
    "SingularMatrixError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "complex_linear_solve",
    "grad",
]
