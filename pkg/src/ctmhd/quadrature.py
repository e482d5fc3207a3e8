"""Collapsed Gauss-Jacobi quadrature on simplices.

Points are returned in barycentric coordinates so that the same rule can be
pushed to any affine simplex.  Weights sum to the measure of the reference
simplex (1/6, 1/2, 1 for tet, triangle, segment).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 15


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (Q, dim+1) barycentric
    weights: np.ndarray  # (Q,)
    degree: int

    @property
    def reference_measure(self) -> float:
        dim = self.points.shape[1] - 1
        return 1.0 / math.factorial(dim)

    @property
    def unit_weights(self) -> np.ndarray:
        """Weights rescaled to sum to one (multiply by the element measure)."""
        return self.weights / self.reference_measure


def _gauss_jacobi01(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    # nodes/weights on [0, 1] for the weight (1 - s)**alpha
    t, w = roots_jacobi(n, alpha, 0.0)
    return (t + 1.0) / 2.0, w / 2.0 ** (alpha + 1.0)


def _npoints(degree: int) -> int:
    if degree < 0 or degree > MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree} (max {MAX_DEGREE})")
    return max(1, math.ceil((degree + 1) / 2))


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> QuadratureRule:
    n = _npoints(degree)
    a, wa = _gauss_jacobi01(n, 2.0)
    b, wb = _gauss_jacobi01(n, 1.0)
    c, wc = _gauss_jacobi01(n, 0.0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = np.einsum("i,j,k->ijk", wa, wb, wc).ravel()
    x = A.ravel()
    y = (B * (1.0 - A)).ravel()
    z = (C * (1.0 - A) * (1.0 - B)).ravel()
    pts = np.column_stack([1.0 - x - y - z, x, y, z])
    return QuadratureRule(pts, W, degree)


@lru_cache(maxsize=None)
def tri_rule(degree: int) -> QuadratureRule:
    n = _npoints(degree)
    a, wa = _gauss_jacobi01(n, 1.0)
    b, wb = _gauss_jacobi01(n, 0.0)
    A, B = np.meshgrid(a, b, indexing="ij")
    W = np.outer(wa, wb).ravel()
    x = A.ravel()
    y = (B * (1.0 - A)).ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(pts, W, degree)


@lru_cache(maxsize=None)
def line_rule(degree: int) -> QuadratureRule:
    n = _npoints(degree)
    s, w = _gauss_jacobi01(n, 0.0)
    return QuadratureRule(np.column_stack([1.0 - s, s]), w, degree)


def quadrature(degree: int, dim: int = 3) -> QuadratureRule:
    """Rule exact for polynomials of total degree ``degree`` on a ``dim``-simplex."""
    rules = {1: line_rule, 2: tri_rule, 3: tet_rule}
    if dim not in rules:
        raise ValueError(f"no simplex rule for dim={dim}")
    return rules[dim](degree)
