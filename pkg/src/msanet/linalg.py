"""Dense float64 array kernels with strict shape and finiteness checks.

Everything downstream (layers, propagation, training) goes through these
wrappers, so a NaN or a mismatched dimension fails loudly at the operation
that produced it instead of three modules later.
"""

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ValueError):
    """An operation produced or received NaN/Inf entries."""


def as_array(a, ndim: int | None = None) -> Array:
    """Coerce to a float64 ndarray, optionally enforcing dimensionality."""
    out = np.asarray(a, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise ShapeError(f"expected {ndim}-d array, got shape {out.shape}")
    return out


def check_finite(a: Array, context: str = "array") -> Array:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{context} contains NaN or Inf")
    return a


def matmul(a: Array, b: Array) -> Array:
    """Matrix product a @ b with explicit inner-dimension checking."""
    a = as_array(a, ndim=2)
    b = as_array(b, ndim=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return check_finite(a @ b, "matmul result")


def outer(p: Array, x: Array) -> Array:
    """Rank-one matrix p x^T from two vectors."""
    p = as_array(p, ndim=1)
    x = as_array(x, ndim=1)
    return check_finite(np.outer(p, x), "outer result")


def frobenius_norm_sq(a: Array) -> float:
    """Sum of squared entries."""
    a = as_array(a)
    return float(check_finite(np.sum(a * a), "frobenius_norm_sq result"))


def elementwise(a: Array, f) -> Array:
    """Apply a scalar map entrywise.

    f may be numpy-vectorized already (np.tanh) or a plain Python scalar
    function; both produce a float64 array of the same shape.
    """
    a = as_array(a)
    try:
        out = np.asarray(f(a), dtype=np.float64)
        if out.shape != a.shape:
            raise TypeError
    except (TypeError, ValueError):
        out = np.vectorize(f, otypes=[np.float64])(a)
    return check_finite(out, "elementwise result")
