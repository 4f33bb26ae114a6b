"""Dense numeric core.

Tensors are plain row-major ``numpy.ndarray`` objects.  Storage is float32;
every matrix product and linear solve here accumulates in float64.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
import scipy.linalg

from vitmerge import DimensionError, SingularSystemError

Tensor = np.ndarray

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64

PIVOT_RTOL = 1e-10
RIDGE_SCALE = 1e-6
DEGENERATE_NORM = 1e-12


class SolveResult(NamedTuple):
    x: Tensor
    regularized: bool


class CosineResult(NamedTuple):
    value: float
    degenerate: bool


def as_storage(a) -> Tensor:
    return np.ascontiguousarray(a, dtype=STORAGE_DTYPE)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a.astype(ACCUM_DTYPE, copy=False), b.astype(ACCUM_DTYPE, copy=False))


def _lu_factor(a):
    with warnings.catch_warnings():
        # singular pivots are detected and handled by the caller
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        return scipy.linalg.lu_factor(a, check_finite=False)


def _lu_ok(lu: Tensor, scale: float) -> bool:
    pivots = np.abs(np.diag(lu))
    return bool(np.all(np.isfinite(lu))) and pivots.min() >= PIVOT_RTOL * scale


def solve(a: Tensor, b: Tensor, *, full_output: bool = False):
    """Solve ``a @ x = b`` by LU with partial pivoting.

    A numerically singular ``a`` (smallest pivot below ``1e-10 * max|a|``) is
    retried once with a ridge ``eps * I``, ``eps = 1e-6 * trace(a) / d``.
    With ``full_output`` a :class:`SolveResult` carrying the ridge flag is
    returned instead of the bare solution.
    """
    a = np.asarray(a, dtype=ACCUM_DTYPE)
    b = np.asarray(b, dtype=ACCUM_DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"solve needs a square matrix, got {a.shape}")
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise DimensionError(f"right-hand side {b.shape} does not match {a.shape}")
    d = a.shape[0]
    if d == 0:
        raise DimensionError("solve on an empty system")
    scale = float(np.abs(a).max())
    regularized = False
    lu, piv = _lu_factor(a)
    if scale == 0.0 or not _lu_ok(lu, scale):
        eps = RIDGE_SCALE * float(np.trace(a)) / d
        if not eps > 0.0:
            raise SingularSystemError("matrix is singular and has no positive trace for a ridge")
        a_reg = a + eps * np.eye(d)
        lu, piv = _lu_factor(a_reg)
        if not _lu_ok(lu, float(np.abs(a_reg).max())):
            raise SingularSystemError("matrix is singular even after ridge regularization")
        regularized = True
    x = scipy.linalg.lu_solve((lu, piv), b, check_finite=False)
    if vector_rhs:
        x = x[:, 0]
    return SolveResult(x, regularized) if full_output else x


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_similarity(a: Tensor, b: Tensor, *, full_output: bool = False):
    """Cosine of the angle between two flattened tensors.

    Returns 0 when either norm is below 1e-12 (flagged as degenerate when
    ``full_output`` is set).
    """
    a = np.asarray(a, dtype=ACCUM_DTYPE).ravel()
    b = np.asarray(b, dtype=ACCUM_DTYPE).ravel()
    if a.size != b.size:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise DimensionError("cosine similarity of empty vectors")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if np.sqrt(aa) < DEGENERATE_NORM or np.sqrt(bb) < DEGENERATE_NORM:
        return CosineResult(0.0, True) if full_output else 0.0
    # sqrt(aa * bb) keeps cos(a, a) exactly 1.0
    value = float(np.dot(a, b)) / float(np.sqrt(aa * bb))
    value = min(1.0, max(-1.0, value))
    return CosineResult(value, False) if full_output else value
