"""Dense matrices and mixed-precision matmul.

A mixed-precision GEMM multiplies in low precision and accumulates in
high precision, which is the same as an exact (float64) product of the
two quantized operands.
"""

from __future__ import annotations

import numpy as np

from .quant import QuantGrid, Rounding, ThresholdStream, quantize


class DimensionError(ValueError):
    pass


def as_mat(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        r, c = np.argwhere(~np.isfinite(m))[0]
        raise ValueError(f"{name} has a non-finite entry at ({r}, {c})")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def mp_matmul(
    a: np.ndarray,
    b: np.ndarray,
    grid_a: QuantGrid,
    mode_a: Rounding,
    grid_b: QuantGrid,
    mode_b: Rounding,
    stream: ThresholdStream | None = None,
) -> np.ndarray:
    """``matmul(Q(a), Q(b))``; ``a`` is quantized fully before ``b`` from the same stream."""
    a = as_mat(a, "A")
    b = as_mat(b, "B")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    qa = quantize(a, grid_a, mode_a, stream)
    qb = quantize(b, grid_b, mode_b, stream)
    return matmul(qa, qb)
