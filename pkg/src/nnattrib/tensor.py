"""Dense float64 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with at least one
dimension and no zero-sized axes. The helpers here add the few contracts numpy
leaves open: a matrix product with a fixed accumulation order, checked
division, compensated summation and lowest-index argmax.
"""

from __future__ import annotations

import math
from typing import Union

import numpy as np

from .errors import ShapeError, StabilizedDivisionError

Tensor = np.ndarray
Scalar = Union[int, float]

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def as_tensor(values, shape=None) -> Tensor:
    """Convert ``values`` to a float64 tensor, optionally reshaping it."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != math.prod(shape):
            raise ShapeError(f"cannot view {arr.size} values as shape {list(shape)}")
        arr = arr.reshape(shape)
    check_tensor(arr)
    return arr


def check_tensor(a: Tensor) -> None:
    if a.ndim == 0:
        raise ShapeError("tensor shape must be non-empty")
    if any(d < 1 for d in a.shape):
        raise ShapeError(f"tensor dimensions must be >= 1, got {list(a.shape)}")


def zeros(shape) -> Tensor:
    return np.zeros(tuple(shape), dtype=np.float64)


def identity(n: int) -> Tensor:
    return np.eye(n, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` for rank-2 operands.

    Each output entry is accumulated left to right over the inner index,
    ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, i.e. the same order as a
    naive triple loop. Results are therefore bit-reproducible and do not
    depend on the BLAS build.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        out += tmp
    return out


def elementwise(op: str, a: Tensor, b, *, ieee: bool = False) -> Tensor:
    """Apply ``op`` (add, sub, mul, div, max) elementwise.

    ``b`` is a tensor of the same shape or a scalar. Division by an exact zero
    raises :class:`StabilizedDivisionError` unless ``ieee=True``.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.ndim(b) != 0:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != a.shape:
            raise ShapeError(f"elementwise {op}: shapes {list(a.shape)} and {list(b.shape)} differ")
    if op == "div":
        if not ieee and np.any(np.asarray(b) == 0.0):
            raise StabilizedDivisionError("division by exact zero")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(a, b)
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def safe_divide(num: Tensor, den: Tensor) -> Tensor:
    """``num / den`` with entries whose denominator is exactly zero set to 0."""
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0.0
    return np.where(zero, 0.0, num / np.where(zero, 1.0, den))


def stabilize(den: Tensor, eps: float) -> Tensor:
    """Push ``den`` away from zero by ``eps`` in the direction of its sign, sign(0) = +1."""
    return den + eps * np.where(den >= 0.0, 1.0, -1.0)


def reduce(op: str, a: Tensor):
    """Reduce a whole tensor with ``sum``, ``max`` or ``argmax``.

    ``sum`` is compensated (exactly rounded, via :func:`math.fsum`); ``argmax``
    returns the lowest flat index among ties.
    """
    flat = np.asarray(a, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    if op == "sum":
        return math.fsum(flat.tolist())
    if op == "max":
        return float(flat.max())
    if op == "argmax":
        return int(np.argmax(flat))
    raise ValueError(f"unknown reduction {op!r}")
