"""Finite-difference coefficients for higher-order drift and diffusion estimators.

The order-i estimator combines the first i multi-step increments of a
trajectory so that the one-sided difference

    (1/dt) * sum_{j=1..i} a_j (s(j dt) - s(0))

matches d/dt s(0) to O(dt^i).  Matching Taylor terms gives the linear system

    sum_j a_j j^k = delta_{k,1},   k = 1..i,

whose coefficient matrix is the Vandermonde-type matrix A_{kj} = j^k.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import ConfigError

__all__ = ["fd_coefficients", "error_constant"]


@lru_cache(maxsize=None)
def _coefficients_tuple(order: int) -> tuple[float, ...]:
    powers = np.arange(1, order + 1)
    system = np.power(np.arange(1, order + 1, dtype=float)[None, :], powers[:, None])
    rhs = np.zeros(order)
    rhs[0] = 1.0
    coeffs = np.linalg.solve(system, rhs)
    return tuple(coeffs.tolist())


def fd_coefficients(order: int) -> np.ndarray:
    """Return the stencil weights a_1..a_i for the order-i increment combination.

    order=1 gives [1], order=2 gives [2, -1/2], order=3 gives [3, -3/2, 1/3].
    """
    if not isinstance(order, (int, np.integer)) or isinstance(order, bool):
        raise ConfigError(f"order must be an integer, got {order!r}")
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    return np.array(_coefficients_tuple(int(order)))


def error_constant(order: int) -> float:
    """Leading Taylor-remainder constant of the order-i stencil.

    Equals sum_j |a_j| j^(i+1) / (i+1)! and multiplies the dt^i term of the
    drift-estimator bias bound.  Values: 0.5, 1.0, 2.25 for orders 1, 2, 3.
    """
    coeffs = fd_coefficients(order)
    j = np.arange(1, order + 1, dtype=float)
    return float(np.sum(np.abs(coeffs) * j ** (order + 1)) / math.factorial(order + 1))
