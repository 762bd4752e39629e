"""Optimal correction of correspondences onto the epipolar manifold, and DLT triangulation.

The correction solves, for a correspondence (p, pt) and essential matrix E,

    min  d(p, q)^2 + d(pt, qt)^2   subject to   qt' E q = 0

globally: both points are translated to the origin, the frames are rotated so
the epipoles sit on the x-axes, the one-parameter pencil of epipolar line
pairs is minimized via the real roots of a degree-6 polynomial (companion
matrix eigenvalues) plus the asymptotic candidate, and the points are
projected onto the selected line pair and transformed back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EpipoleCoincidence, NumericalFailure, RankDeficient

# Status codes of the vectorized correction.
OK = 0
STATUS_EPIPOLE = 1
STATUS_NUMERICAL = 2

_REAL_ROOT_IMAG_TOL = 1e-8
_EPIPOLE_DIST_TOL = 1e-9

DEFAULT_LABEL_TAU = 3e-3


@dataclass(frozen=True)
class CorrectedPair:
    """A corrected correspondence and its squared displacement cost."""

    q: np.ndarray
    q_t: np.ndarray
    cost: float


def _pmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched polynomial product, coefficients low-order first, shape (n, deg+1)."""
    n, p = a.shape
    q = b.shape[1]
    out = np.zeros((n, p + q - 1))
    for i in range(p):
        for j in range(q):
            out[:, i + j] += a[:, i] * b[:, j]
    return out


def _epipoles(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right and left epipoles (null vectors) of a rank-2 matrix."""
    u, _, vt = np.linalg.svd(e)
    return vt[2], u[:, 2]


def _pencil_costs(t: np.ndarray, a, b, c, d, f, fp) -> np.ndarray:
    """Squared displacement cost of the epipolar pair at pencil parameter t."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        left = t**2 / (1.0 + (f * t) ** 2)
        den = (a * t + b) ** 2 + fp**2 * (c * t + d) ** 2
        right = (c * t + d) ** 2 / den
    return left + right


def _otm_correct_core(
    e: np.ndarray, p: np.ndarray, p_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized optimal correction.

    Returns (q, q_t, cost, status) with q/q_t of shape (n, 2).  Rows whose
    status is nonzero carry the uncorrected points and cost +inf.
    """
    e = np.asarray(e, dtype=np.float64)
    e = e / np.linalg.norm(e)  # results are invariant to the scale of E
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    p_t = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    n = p.shape[0]
    status = np.zeros(n, dtype=np.int8)

    ep_r, ep_l = _epipoles(e)

    # Translate both measured points to their origins; epipoles move with them.
    er = np.empty((n, 3))
    er[:, 0] = ep_r[0] - p[:, 0] * ep_r[2]
    er[:, 1] = ep_r[1] - p[:, 1] * ep_r[2]
    er[:, 2] = ep_r[2]
    el = np.empty((n, 3))
    el[:, 0] = ep_l[0] - p_t[:, 0] * ep_l[2]
    el[:, 1] = ep_l[1] - p_t[:, 1] * ep_l[2]
    el[:, 2] = ep_l[2]

    sr = np.hypot(er[:, 0], er[:, 1])
    sl = np.hypot(el[:, 0], el[:, 1])
    coincident = (sr < _EPIPOLE_DIST_TOL * np.abs(er[:, 2])) | (
        sl < _EPIPOLE_DIST_TOL * np.abs(el[:, 2])
    )
    status[coincident] = STATUS_EPIPOLE
    # Keep the math well-defined on masked rows.
    sr = np.where(sr == 0.0, 1.0, sr)
    sl = np.where(sl == 0.0, 1.0, sl)
    er /= sr[:, None]
    el /= sl[:, None]

    t1inv = np.tile(np.eye(3), (n, 1, 1))
    t1inv[:, 0, 2] = p[:, 0]
    t1inv[:, 1, 2] = p[:, 1]
    t2inv = np.tile(np.eye(3), (n, 1, 1))
    t2inv[:, 0, 2] = p_t[:, 0]
    t2inv[:, 1, 2] = p_t[:, 1]

    r1 = np.zeros((n, 3, 3))
    r1[:, 0, 0] = er[:, 0]
    r1[:, 0, 1] = er[:, 1]
    r1[:, 1, 0] = -er[:, 1]
    r1[:, 1, 1] = er[:, 0]
    r1[:, 2, 2] = 1.0
    r2 = np.zeros((n, 3, 3))
    r2[:, 0, 0] = el[:, 0]
    r2[:, 0, 1] = el[:, 1]
    r2[:, 1, 0] = -el[:, 1]
    r2[:, 1, 1] = el[:, 0]
    r2[:, 2, 2] = 1.0

    e1 = np.transpose(t2inv, (0, 2, 1)) @ e @ t1inv
    e2 = r2 @ e1 @ np.transpose(r1, (0, 2, 1))

    f = er[:, 2]
    fp = el[:, 2]
    a = e2[:, 1, 1]
    b = e2[:, 1, 2]
    c = e2[:, 2, 1]
    d = e2[:, 2, 2]

    # g(t) = t((at+b)^2 + fp^2 (ct+d)^2)^2 - (ad-bc)(1+f^2 t^2)^2 (at+b)(ct+d)
    p_ab = np.column_stack([b, a])
    p_cd = np.column_stack([d, c])
    quad = _pmul(p_ab, p_ab) + fp[:, None] ** 2 * _pmul(p_cd, p_cd)
    term1 = _pmul(quad, quad)
    term1 = np.concatenate([np.zeros((n, 1)), term1], axis=1)  # multiply by t
    p_f = np.column_stack([np.ones(n), np.zeros(n), f**2])
    term2 = (a * d - b * c)[:, None] * _pmul(_pmul(_pmul(p_f, p_f), p_ab), p_cd)
    g = np.zeros((n, 7))  # degree 6, low-order first
    g[:, : term1.shape[1]] += term1
    g[:, : term2.shape[1]] -= term2

    # Candidate costs: up to 6 polynomial roots plus the t->inf asymptote.
    costs = np.full((n, 7), np.inf)
    t_cand = np.zeros((n, 7))

    scale = np.abs(g).max(axis=1)
    solvable = ~coincident & (scale > 0.0)
    lead_ok = solvable & (np.abs(g[:, 6]) > 1e-13 * scale)
    if np.any(lead_ok):
        idx = np.nonzero(lead_ok)[0]
        monic = g[idx] / g[idx, 6][:, None]
        comp = np.zeros((len(idx), 6, 6))
        comp[:, 0, :] = -monic[:, 5::-1]
        comp[:, np.arange(1, 6), np.arange(5)] = 1.0
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) < _REAL_ROOT_IMAG_TOL
        tr = np.where(real, roots.real, 0.0)
        cr = _pencil_costs(
            tr, a[idx, None], b[idx, None], c[idx, None], d[idx, None],
            f[idx, None], fp[idx, None],
        )
        cr = np.where(real, cr, np.inf)
        costs[idx, :6] = cr
        t_cand[idx, :6] = tr
    # Degree-deficient rows: fall back to the scalar root finder.
    for i in np.nonzero(solvable & ~lead_ok)[0]:
        coeffs = np.trim_zeros(g[i][::-1], "f")
        roots = np.roots(coeffs) if len(coeffs) > 1 else np.array([])
        k = 0
        for r in roots:
            if abs(r.imag) < _REAL_ROOT_IMAG_TOL and k < 6:
                t_cand[i, k] = r.real
                costs[i, k] = _pencil_costs(r.real, a[i], b[i], c[i], d[i], f[i], fp[i])
                k += 1

    with np.errstate(divide="ignore", invalid="ignore"):
        s_inf = 1.0 / f**2 + c**2 / (a**2 + fp**2 * c**2)
    costs[:, 6] = np.where(np.isfinite(s_inf) & solvable, s_inf, np.inf)

    costs = np.where(np.isnan(costs), np.inf, costs)
    best = np.argmin(costs, axis=1)
    best_cost = costs[np.arange(n), best]
    failed = ~coincident & ~np.isfinite(best_cost)
    status[failed] = STATUS_NUMERICAL

    t_best = t_cand[np.arange(n), best]
    at_inf = best == 6

    # Epipolar lines of the selected pencil member, in the rotated frames.
    l1 = np.column_stack([t_best * f, np.ones(n), -t_best])
    l1[at_inf] = np.column_stack([f[at_inf], np.zeros(at_inf.sum()), -np.ones(at_inf.sum())])
    ct_d = c * t_best + d
    at_b = a * t_best + b
    l2 = np.column_stack([-fp * ct_d, at_b, ct_d])
    l2[at_inf] = np.column_stack([-fp[at_inf] * c[at_inf], a[at_inf], c[at_inf]])

    def closest_to_origin(lines):
        lam, mu, nu = lines[:, 0], lines[:, 1], lines[:, 2]
        return np.column_stack([-lam * nu, -mu * nu, lam**2 + mu**2])

    x1 = closest_to_origin(l1)
    x2 = closest_to_origin(l2)
    q_h = np.einsum("nij,nj->ni", t1inv @ np.transpose(r1, (0, 2, 1)), x1)
    qt_h = np.einsum("nij,nj->ni", t2inv @ np.transpose(r2, (0, 2, 1)), x2)

    ok = status == OK
    q = p.copy()
    q_t = p_t.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        q[ok] = q_h[ok, :2] / q_h[ok, 2:]
        q_t[ok] = qt_h[ok, :2] / qt_h[ok, 2:]

    cost = np.full(n, np.inf)
    diff = np.concatenate([q - p, q_t - p_t], axis=1)
    cost[ok] = np.einsum("ij,ij->i", diff[ok], diff[ok])
    bad = ok & ~np.isfinite(cost)
    status[bad] = STATUS_NUMERICAL
    cost[~(status == OK)] = np.inf
    return q, q_t, cost, status


def otm_correct(e: np.ndarray, p: np.ndarray, p_t: np.ndarray) -> CorrectedPair:
    """Globally optimal correction of one correspondence onto qt' E q = 0.

    Raises EpipoleCoincidence when an input point lies within 1e-9 of its
    epipole, and NumericalFailure when no usable candidate exists.
    """
    q, q_t, cost, status = _otm_correct_core(
        e, np.asarray(p, dtype=np.float64).reshape(1, 2),
        np.asarray(p_t, dtype=np.float64).reshape(1, 2),
    )
    if status[0] == STATUS_EPIPOLE:
        raise EpipoleCoincidence("input point coincides with its epipole")
    if status[0] != OK:
        raise NumericalFailure("no real root and non-finite asymptote")
    return CorrectedPair(q[0], q_t[0], float(cost[0]))


def otm_correct_batch(
    e: np.ndarray, pairs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Optimal correction of match rows (p, q, pt, qt); see _otm_correct_core."""
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
    return _otm_correct_core(e, pairs[:, :2], pairs[:, 2:])


def label_by_otm(
    e: np.ndarray,
    pairs: np.ndarray,
    tau: float = DEFAULT_LABEL_TAU,
    return_diagnostics: bool = False,
):
    """Inlier labels: 1 iff the optimal-correction displacement norm is < tau.

    Degenerate rows (epipole coincidence or numerical failure) are labeled 0;
    their count is available via return_diagnostics.
    """
    if tau <= 0 and tau != 0:
        raise ValueError("tau must be >= 0")
    _, _, cost, status = otm_correct_batch(e, pairs)
    labels = ((status == OK) & (np.sqrt(cost) < tau)).astype(np.uint8)
    if return_diagnostics:
        return labels, int(np.count_nonzero(status != OK))
    return labels


def triangulate_point(
    r: np.ndarray, t: np.ndarray, q: np.ndarray, q_t: np.ndarray
) -> tuple[np.ndarray, tuple[bool, bool]]:
    """Linear DLT triangulation with cameras [I|0] and [R|t].

    Returns the 3D point and per-camera positive-depth flags.  Raises
    RankDeficient when the two smallest singular values of the 4x4 system
    are within 1e-12 of each other (parallel rays).
    """
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    x, y = np.asarray(q, dtype=np.float64).reshape(2)
    xt, yt = np.asarray(q_t, dtype=np.float64).reshape(2)
    p2 = np.column_stack([r, t])
    a = np.stack([
        np.array([-1.0, 0.0, x, 0.0]),
        np.array([0.0, -1.0, y, 0.0]),
        xt * p2[2] - p2[0],
        yt * p2[2] - p2[1],
    ])
    _, s, vt = np.linalg.svd(a)
    if s[2] - s[3] < 1e-12:
        raise RankDeficient("triangulation system is rank deficient")
    xh = vt[3]
    if abs(xh[3]) < 1e-300:
        return xh[:3], (False, False)
    point = xh[:3] / xh[3]
    depth2 = r[2] @ point + t[2]
    return point, (bool(point[2] > 0), bool(depth2 > 0))
