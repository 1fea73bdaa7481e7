"""Dense tensor conventions and the finite-difference gradient oracle.

Every numeric carrier in this package is a plain numpy ndarray: C-ordered,
dtype float64. The helpers here enforce those conventions and raise errors
that name the offending axis, so shape bugs surface at the boundary where
they happen instead of deep inside a kernel.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

# The one array type used for activations, weights and gradients.
Tensor = np.ndarray


def as_tensor(x, name: str = "tensor") -> Tensor:
    """Convert to a C-contiguous float64 array."""
    try:
        arr = np.ascontiguousarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ShapeError(f"{name}: cannot interpret value as a dense real array: {exc}") from exc
    return arr


def require_ndim(x: Tensor, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name}: expected a rank-{ndim} array, got rank {x.ndim} with shape {x.shape}")


def require_axis(x: Tensor, axis: int, extent: int, name: str) -> None:
    if x.shape[axis] != extent:
        raise ShapeError(
            f"{name}: axis {axis} has extent {x.shape[axis]}, expected {extent} (shape {x.shape})"
        )


def require_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        for axis, (ea, eb) in enumerate(zip(a.shape, b.shape)):
            if ea != eb:
                raise ShapeError(f"{name}: axis {axis} differs, {ea} vs {eb}")
        raise ShapeError(f"{name}: rank differs, {a.shape} vs {b.shape}")


def require_finite(x: Tensor, name: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NumericError(f"{name}: non-finite value at flat index {bad}")


def finite_difference_grad(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    This is the independent oracle every analytic backward pass is checked
    against: (f(x + h*e_i) - f(x - h*e_i)) / (2h) for each coordinate i.
    It is O(2*size) evaluations of f, so keep x small.
    """
    if h <= 0:
        raise ParameterError(f"finite_difference_grad: h must be positive, got {h}")
    x = as_tensor(x, "x")
    grad = np.empty_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_difference_grad: f returned a non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-3) -> float:
    """Worst element-wise relative error between two gradients.

    The denominator is clamped at `floor`, so entries smaller than the floor
    are effectively compared absolutely; this keeps finite-difference noise
    on near-zero gradient entries from drowning the check.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    require_same_shape(a, n, "rel_error")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def global_norm(arrays: Sequence[Tensor]) -> float:
    """Euclidean norm of a group of arrays viewed as one flat vector."""
    total = 0.0
    for a in arrays:
        total += float(np.dot(a.ravel(), a.ravel()))
    return float(np.sqrt(total))
