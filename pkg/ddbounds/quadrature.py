from __future__ import annotations

from functools import lru_cache
from typing import Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss


@lru_cache(maxsize=None)
def gauss_legendre(n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights mapped to `[0, 1]` (weights sum to 1)."""
    if n_points < 1:
        msg = f"`n_points` must be at least 1. Found {n_points}"
        raise ValueError(msg)
    t, w = leggauss(n_points)
    return 0.5 * (t + 1.0), 0.5 * w


def edge_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature on the unit segment exact for polynomials up to `degree`.

    Returns:
        Points `t` in `[0, 1]` and weights summing to 1.
    """
    if degree < 0:
        msg = f"`degree` must be non-negative. Found {degree}"
        raise ValueError(msg)
    return gauss_legendre(degree // 2 + 1)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature on the reference triangle `(0,0), (1,0), (0,1)` exact for polynomials up to `degree`.

    The rule is the collapsed (Duffy) tensor product of two Gauss-Legendre rules: with `t, s` in the unit square the
    point is `(t, s (1 - t))` and the weight carries the Jacobian `1 - t`. A total degree `d` integrand becomes a
    polynomial of degree `d + 1` in `t`, hence `ceil((d + 2) / 2)` points per direction.

    Arguments:
        degree: Polynomial degree to integrate exactly.

    Returns:
        Reference points of shape `(q, 2)` and weights of shape `(q,)` summing to 1/2.

    Examples:
        ```python
        from ddbounds.quadrature import triangle_rule

        points, weights = triangle_rule(8)
        weights.sum()  # 0.5
        ```
    """
    if degree < 0:
        msg = f"`degree` must be non-negative. Found {degree}"
        raise ValueError(msg)
    n = (degree + 3) // 2
    t, wt = gauss_legendre(n)
    tt, ss = np.meshgrid(t, t, indexing="ij")
    ww = np.outer(wt, wt) * (1.0 - tt)
    points = np.column_stack([tt.ravel(), (ss * (1.0 - tt)).ravel()])
    return points, ww.ravel()


def barycentric(points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates `(1 - xi - eta, xi, eta)` of reference points, shape `(q, 3)`."""
    return np.column_stack([1.0 - points[:, 0] - points[:, 1], points[:, 0], points[:, 1]])


def map_triangles(vertices: np.ndarray, degree: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Maps the reference triangle rule onto a batch of triangles.

    Arguments:
        vertices: Triangle vertex coordinates, shape `(m, 3, 2)`.
        degree: Polynomial degree to integrate exactly.

    Returns:
        Tuple `(x, y, weights, shape)` with physical coordinates and weights of shape `(m, q)` and the barycentric
        shape function values at the reference points, shape `(q, 3)`.
    """
    points, weights = triangle_rule(degree)
    lam = barycentric(points)
    xy = np.einsum("qa,mad->mqd", lam, vertices)
    e1 = vertices[:, 1] - vertices[:, 0]
    e2 = vertices[:, 2] - vertices[:, 0]
    jac = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return xy[..., 0], xy[..., 1], jac[:, None] * weights[None, :], lam
