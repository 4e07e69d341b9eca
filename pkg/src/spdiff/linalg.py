"""Dense SPD matrix algebra and Fisher-metric geodesics between zero-mean Gaussians.

Matrices are plain ``numpy.ndarray`` objects of shape ``(n, n)``.  Functions that
accept an SPD matrix validate symmetry and positive definiteness through
:func:`eigh`; nothing is mutated in place.

The dense route is intended for verification and small covariances.  Image-scale
covariances are diagonal in the Fourier basis and are handled element-wise in
:mod:`spdiff.corruption`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import NotPositiveDefinite, NotSymmetric, OutOfRange

__all__ = [
    "EigenDecomposition",
    "GeodesicPath",
    "eigh",
    "spd_apply",
    "matrix_power",
    "geodesic",
    "geodesic_point",
    "geodesic_direct",
    "path_length",
    "geodesic_ode_residual",
]

JACOBI_MAX_DIM = 64
SYMMETRY_RTOL = 1e-12
MIN_EIGVAL = 1e-300

Curve = Callable[[float], np.ndarray]


class EigenDecomposition(NamedTuple):
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"max |A - A^T| = {asym:.3e} exceeds {SYMMETRY_RTOL:g} * max|A|")
    return 0.5 * (a + a.T)


def _jacobi(a: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations; returns (eigvals, eigvecs) unsorted."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    tiny = np.finfo(float).tiny
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= np.finfo(float).eps * 1e-2 * np.linalg.norm(np.diag(a)) or off < tiny:
            break
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                # skip entries already negligible against both diagonal entries
                if abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])) or abs(apq) < tiny:
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotated = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    return np.diag(a).copy(), v


def eigh(a: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a symmetric positive-definite matrix.

    Eigenvalues are returned in descending order.  Matrices up to
    ``JACOBI_MAX_DIM`` use cyclic Jacobi rotations; larger ones go through
    LAPACK.

    Raises
    ------
    NotSymmetric
        If ``max|A - A^T| > 1e-12 * max|A|``.
    NotPositiveDefinite
        If any eigenvalue is ``<= 1e-300``.
    """
    a = _check_symmetric(a)
    if a.shape[0] <= JACOBI_MAX_DIM:
        w, v = _jacobi(a)
    else:
        w, v = np.linalg.eigh(a)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    if w.size and w[-1] <= MIN_EIGVAL:
        raise NotPositiveDefinite(f"smallest eigenvalue {w[-1]:.3e} is not positive")
    return EigenDecomposition(w, v)


def spd_apply(a: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a scalar function to the spectrum of an SPD matrix."""
    w, v = eigh(a)
    out = (v * fn(w)) @ v.T
    return 0.5 * (out + out.T)


def matrix_power(a: np.ndarray, p: float) -> np.ndarray:
    """Real power of an SPD matrix, ``V diag(w**p) V^T``."""
    return spd_apply(a, lambda w: w ** p)


@dataclass(frozen=True)
class GeodesicPath:
    """Fisher geodesic from ``sigma0`` (t=0) to ``sigma1`` (t=1).

    Stores the simultaneous congruence ``sigma0 = F diag(D) F^T``,
    ``sigma1 = F F^T`` so that interior points cost one matrix product.
    """

    sigma0: np.ndarray
    sigma1: np.ndarray
    congruence: np.ndarray
    diag_eigvals: np.ndarray

    @property
    def dim(self) -> int:
        return self.sigma0.shape[0]

    def __call__(self, t: float) -> np.ndarray:
        return geodesic_point(self, t)


def geodesic(sigma0: np.ndarray, sigma1: np.ndarray) -> GeodesicPath:
    """Build the shortest Fisher path between N(0, sigma0) and N(0, sigma1)."""
    sigma0 = _check_symmetric(sigma0)
    sigma1 = _check_symmetric(sigma1)
    if sigma0.shape != sigma1.shape:
        raise ValueError(f"endpoint shapes differ: {sigma0.shape} vs {sigma1.shape}")
    w1, v1 = eigh(sigma1)
    root = (v1 * np.sqrt(w1)) @ v1.T
    inv_root = (v1 / np.sqrt(w1)) @ v1.T
    whitened = inv_root @ sigma0 @ inv_root
    d, u = eigh(0.5 * (whitened + whitened.T))
    return GeodesicPath(sigma0, sigma1, root @ u, d)


def geodesic_point(path: GeodesicPath, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise OutOfRange(f"t={t} outside [0, 1]")
    f = path.congruence
    out = (f * path.diag_eigvals ** (1.0 - t)) @ f.T
    return 0.5 * (out + out.T)


def geodesic_direct(sigma0: np.ndarray, sigma1: np.ndarray, t: float) -> np.ndarray:
    """Closed form ``S1^1/2 (S1^-1/2 S0 S1^-1/2)^(1-t) S1^1/2`` via matrix powers.

    Independent of the congruence route; used to cross-check it.
    """
    if not 0.0 <= t <= 1.0:
        raise OutOfRange(f"t={t} outside [0, 1]")
    half = matrix_power(sigma1, 0.5)
    neg_half = matrix_power(sigma1, -0.5)
    inner = neg_half @ sigma0 @ neg_half
    out = half @ matrix_power(0.5 * (inner + inner.T), 1.0 - t) @ half
    return 0.5 * (out + out.T)


def _as_matrix(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def path_length(curve: Curve, t0: float = 0.0, t1: float = 1.0, n_steps: int = 1000) -> float:
    """Fisher length ``(1/sqrt 2) * integral of sqrt(Tr(S^-1 S' S^-1 S'))``.

    Midpoint rule on ``n_steps`` cells; the velocity at each midpoint is the
    central difference of the neighbouring grid nodes, so the error is O(h^2).
    ``curve`` may return scalars (treated as 1x1 matrices).
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    h = (t1 - t0) / n_steps
    nodes = [_as_matrix(curve(t0 + k * h)) for k in range(n_steps + 1)]
    total = 0.0
    for k in range(n_steps):
        mid = _as_matrix(curve(t0 + (k + 0.5) * h))
        vel = (nodes[k + 1] - nodes[k]) / h
        m = np.linalg.solve(mid, vel)
        total += np.sqrt(max(np.trace(m @ m), 0.0))
    return abs(h) * total / np.sqrt(2.0)


def _ode_residual_matrix(curve: Curve, t: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    lo, mid, hi = (_as_matrix(curve(t - h)), _as_matrix(curve(t)), _as_matrix(curve(t + h)))
    vel = (hi - lo) / (2.0 * h)
    acc = (hi - 2.0 * mid + lo) / (h * h)
    return acc - vel @ np.linalg.solve(mid, vel), mid


def geodesic_ode_residual(curve: Curve, t: float, h: float = 1e-3, richardson: bool = True) -> float:
    """Relative defect of ``S'' = S' S^-1 S'`` along ``curve`` at ``t``.

    Central differences with step ``h``; with ``richardson`` the residual matrices
    at ``h`` and ``h/2`` are combined to cancel the O(h^2) truncation term.
    The curve must be evaluable on ``[t - h, t + h]``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    res, mid = _ode_residual_matrix(curve, t, h)
    if richardson:
        res_half, _ = _ode_residual_matrix(curve, t, 0.5 * h)
        res = (4.0 * res_half - res) / 3.0
    return float(np.linalg.norm(res) / np.linalg.norm(mid))
