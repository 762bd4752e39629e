"""Weighted homogeneous least-squares model heads with analytic gradients.

Both heads share one primitive: the unit eigenvector of the smallest
eigenvalue of a confidence-weighted Gram matrix M = sum_i c_i a_i a_i'.
For the essential matrix the rows a_i are the 9-entry epipolar design rows;
for the 2D line head they are (x, y, 1).  Weights are normalized by their sum
before accumulation, which keeps the spectrum scale-free and the solution
exactly invariant to power-of-two weight rescalings.

The backward pass uses the eigenvector perturbation identity
dv = sum_{j>1} (v_j' dM v_1) / (lambda_1 - lambda_j) v_j, chained through the
weight normalization and the row construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSpectrum, DegenerateSpectrumWarning, InsufficientPoints

GAP_WARN_TOL = 1e-10
GAP_GRAD_TOL = 1e-8
_SUPPORT_TOL = 1e-8


@dataclass(frozen=True)
class DltSolution:
    """Smallest-eigenvector solution of a weighted Gram system."""

    e_vec: np.ndarray          # unit vector, largest-magnitude entry positive
    lambda_min: float
    spectrum_gap: float        # second smallest minus smallest eigenvalue
    eigvals: np.ndarray = field(repr=False)
    eigvecs: np.ndarray = field(repr=False)

    @property
    def matrix(self) -> np.ndarray:
        """Row-major 3x3 view of a 9-vector solution."""
        return self.e_vec.reshape(3, 3)


def design_rows(pairs: np.ndarray) -> np.ndarray:
    """Epipolar design rows a with a . vec(E) = pt' E p, row-major vec.

    pairs are match rows (p, q, pt, qt) in normalized coordinates.
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
    p, q, pt, qt = pairs.T
    one = np.ones_like(p)
    return np.stack([pt * p, pt * q, pt, qt * p, qt * q, qt, p, q, one], axis=1)


def _solve_min_eigvec(rows: np.ndarray, weights: np.ndarray, min_support: int) -> DltSolution:
    n = rows.shape[0]
    if n < min_support:
        raise InsufficientPoints(f"need at least {min_support} points, got {n}")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != n:
        raise ValueError("weights length does not match point count")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    support = int(np.count_nonzero(weights > _SUPPORT_TOL))
    total = float(weights.sum())
    if support < min_support or total <= 1e-12:
        raise InsufficientPoints(
            f"effective support {support} below {min_support} (weight sum {total:.3e})"
        )
    scaled = rows * (weights / total)[:, None]
    m = scaled.T @ rows
    m = 0.5 * (m + m.T)
    eigvals, eigvecs = np.linalg.eigh(m)
    vec = eigvecs[:, 0].copy()
    i = int(np.argmax(np.abs(vec)))
    if vec[i] < 0:
        vec = -vec
    gap = float(eigvals[1] - eigvals[0])
    if gap < GAP_WARN_TOL:
        warnings.warn(
            f"spectrum gap {gap:.3e} below {GAP_WARN_TOL:.0e}; solution non-unique",
            DegenerateSpectrumWarning,
            stacklevel=3,
        )
    return DltSolution(vec, float(eigvals[0]), gap, eigvals, eigvecs)


def _gram_vjp(
    rows: np.ndarray, weights: np.ndarray, solution: DltSolution, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of upstream . e_vec with respect to rows and raw weights."""
    if solution.spectrum_gap <= GAP_GRAD_TOL:
        raise DegenerateSpectrum(
            f"spectrum gap {solution.spectrum_gap:.3e} too small for a gradient"
        )
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = float(weights.sum())
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    v1 = solution.e_vec
    lam, vecs = solution.eigvals, solution.eigvecs
    coeff = (vecs[:, 1:].T @ upstream) / (lam[0] - lam[1:])
    u = vecs[:, 1:] @ coeff
    a_u = rows @ u
    a_v = rows @ v1
    # u is orthogonal to v1, so the d(1/total) term of the normalized Gram
    # vanishes and only the per-row outer products contribute.
    grad_weights = a_u * a_v / total
    scaled = (weights / total)[:, None]
    grad_rows = scaled * (a_v[:, None] * u[None, :] + a_u[:, None] * v1[None, :])
    return grad_rows, grad_weights


def weighted_dlt(pairs: np.ndarray, weights: np.ndarray) -> DltSolution:
    """Essential-matrix estimate from weighted match rows (eight-point form).

    Returns the raw unit-norm solution without essential-manifold projection;
    evaluation projects separately.  Raises InsufficientPoints below 8 points
    or 8 effectively-weighted points; warns DegenerateSpectrumWarning when the
    spectrum gap makes the minimizer non-unique.
    """
    rows = design_rows(pairs)
    return _solve_min_eigvec(rows, weights, min_support=8)


def weighted_dlt_vjp(
    pairs: np.ndarray,
    weights: np.ndarray,
    solution: DltSolution,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of upstream . e_vec with respect to pairs (n, 4) and weights (n,).

    Raises DegenerateSpectrum when the spectrum gap is at most 1e-8.
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
    rows = design_rows(pairs)
    grad_rows, grad_weights = _gram_vjp(rows, weights, solution, upstream)
    p, q, pt, qt = pairs.T
    g = grad_rows
    grad_pairs = np.stack(
        [
            pt * g[:, 0] + qt * g[:, 3] + g[:, 6],
            pt * g[:, 1] + qt * g[:, 4] + g[:, 7],
            p * g[:, 0] + q * g[:, 1] + g[:, 2],
            p * g[:, 3] + q * g[:, 4] + g[:, 5],
        ],
        axis=1,
    )
    return grad_pairs, grad_weights


def line_rows(points: np.ndarray) -> np.ndarray:
    """Homogeneous rows (x, y, 1) for the 2D total-least-squares line fit."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([points, np.ones(len(points))])


def line_fit_solution(points: np.ndarray, weights: np.ndarray) -> DltSolution:
    """Unit-norm homogeneous line solution (the model head's raw output)."""
    return _solve_min_eigvec(line_rows(points), weights, min_support=2)


def line_fit_vjp(
    points: np.ndarray,
    weights: np.ndarray,
    solution: DltSolution,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of upstream . e_vec with respect to points (n, 2) and weights."""
    rows = line_rows(points)
    grad_rows, grad_weights = _gram_vjp(rows, weights, solution, upstream)
    return grad_rows[:, :2], grad_weights


def weighted_line_fit(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted total-least-squares line (a, b, c) with a^2 + b^2 = 1."""
    vec = line_fit_solution(points, weights).e_vec
    norm = np.hypot(vec[0], vec[1])
    if norm <= 1e-12:
        raise DegenerateSpectrum("line normal vanished; points concentrate at infinity")
    return vec / norm
