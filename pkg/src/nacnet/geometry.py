"""Epipolar geometry primitives: essential matrices, pose decomposition, error metrics.

All functions are pure, operate on plain numpy arrays, and compute in float64.
Image points are normalized (calibrated) camera coordinates; a 2-vector (x, y)
stands for the homogeneous point (x, y, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTranslation, ZeroMatrix

# Distance returned when both epipolar line normals vanish.
DISTANCE_SENTINEL = 1e12

_NORMAL_FLOOR = 1e-30

# pi/2 rotation about z, used in the four-way essential decomposition.
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(v) @ u == cross(v, u)."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def as_homogeneous(p: np.ndarray) -> np.ndarray:
    """Promote a 2-vector to (x, y, 1); pass through a 3-vector with w == 1."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] == 2:
        return np.array([p[0], p[1], 1.0])
    if p.shape[0] == 3:
        return p
    raise ValueError(f"expected a 2- or 3-vector, got shape {p.shape}")


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    """True when r is orthonormal with determinant +1 within tol."""
    r = np.asarray(r, dtype=np.float64)
    return (
        r.shape == (3, 3)
        and np.abs(r.T @ r - np.eye(3)).max() < tol
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def is_essential(e: np.ndarray, tol: float = 1e-8) -> bool:
    """True when e has two equal singular values and one zero, up to scale."""
    s = np.linalg.svd(np.asarray(e, dtype=np.float64), compute_uv=False)
    if s[0] <= 0.0:
        return False
    return abs(s[1] / s[0] - 1.0) < tol and s[2] / s[0] < tol


def essential_from_pose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Essential matrix [t]x @ r with t normalized to unit length first.

    Raises DegenerateTranslation when ||t|| <= 1e-12.
    """
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(t)
    if norm <= 1e-12:
        raise DegenerateTranslation(f"translation norm {norm:.3e} too small")
    return skew(t / norm) @ r


def project_to_essential(m: np.ndarray) -> np.ndarray:
    """Nearest essential matrix with canonical singular values (1, 1, 0).

    Raises ZeroMatrix when ||m||_F <= 1e-12.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)) or np.linalg.norm(m) <= 1e-12:
        raise ZeroMatrix("input matrix is zero or non-finite")
    u, _, vt = np.linalg.svd(m)
    # diag(1,1,0) kills the third column/row, so det sign fixes on u/vt do not
    # change the product; decompose_essential applies its own corrections.
    return u[:, :2] @ vt[:2, :]


def decompose_essential(e: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) candidates of an essential matrix, rotations proper."""
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=np.float64))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    r1 = u @ _W @ vt
    r2 = u @ _W.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Angle of the relative rotation between r_a and r_b, in degrees.

    atan2 of the skew part against (tr - 1) / 2 is equivalent to the arccos
    form but keeps precision for near-identical rotations.
    """
    q = r_a.T @ r_b
    c = (np.trace(q) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm(
        [q[2, 1] - q[1, 2], q[0, 2] - q[2, 0], q[1, 0] - q[0, 1]]
    )
    return float(np.degrees(np.arctan2(s, c)))


def translation_angle_deg(t_a: np.ndarray, t_b: np.ndarray) -> float:
    """Sign- and scale-invariant angle between two translations, in degrees.

    Uses the atan2 form, which stays accurate for near-parallel vectors.
    """
    u = np.asarray(t_a, dtype=np.float64).reshape(3)
    v = np.asarray(t_b, dtype=np.float64).reshape(3)
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    d_minus = np.linalg.norm(u - v)
    d_plus = np.linalg.norm(u + v)
    angle = 2.0 * np.arctan2(min(d_minus, d_plus), max(d_minus, d_plus))
    return float(np.degrees(angle))


@dataclass(frozen=True)
class PoseError:
    """Angular pose errors in degrees; cheirality_failed marks a 180-degree flag."""

    rot_deg: float
    trans_deg: float
    cheirality_failed: bool = False

    @property
    def max_deg(self) -> float:
        return max(self.rot_deg, self.trans_deg)

    def __iter__(self):
        return iter((self.rot_deg, self.trans_deg))


def decompose_and_pose_error(
    e_hat: np.ndarray,
    r_gt: np.ndarray,
    t_gt: np.ndarray,
    inlier_pairs: np.ndarray,
    selection: str = "cheirality",
) -> PoseError:
    """Pose error of an estimated essential matrix against ground truth.

    Extracts the four pose candidates from e_hat and selects one by counting
    triangulated inlier_pairs (rows (p, q, pt, qt)) with positive depth in both
    views.  selection="min_error" instead picks the candidate minimizing
    max(rot, trans) error, for label-free use.  When no candidate passes a
    single cheirality check the result is flagged with 180-degree errors.
    """
    from .triangulation import triangulate_point

    inlier_pairs = np.asarray(inlier_pairs, dtype=np.float64).reshape(-1, 4)
    candidates = decompose_essential(e_hat)

    def errors(r, t):
        return rotation_angle_deg(r, r_gt), translation_angle_deg(t, t_gt)

    if selection == "min_error":
        best = min((errors(r, t) for r, t in candidates), key=lambda e: max(e))
        return PoseError(best[0], best[1])
    if selection != "cheirality":
        raise ValueError(f"unknown selection mode {selection!r}")

    if inlier_pairs.shape[0] == 0:
        raise ValueError("cheirality selection needs at least one inlier pair")
    counts = []
    for r, t in candidates:
        good = 0
        for row in inlier_pairs:
            try:
                _, (ok1, ok2) = triangulate_point(r, t, row[:2], row[2:])
            except Exception:
                continue
            good += ok1 and ok2
        counts.append(good)
    best_idx = int(np.argmax(counts))
    if counts[best_idx] == 0:
        return PoseError(180.0, 180.0, cheirality_failed=True)
    r, t = candidates[best_idx]
    rot, trans = errors(r, t)
    return PoseError(rot, trans)


def symmetric_epipolar_distances(
    e: np.ndarray, p: np.ndarray, p_t: np.ndarray
) -> np.ndarray:
    """Vectorized symmetric epipolar distance for point arrays (n, 2).

    Returns (pt' E p)^2 * (1/||(E' pt)_12||^2 + 1/||(E p)_12||^2) per row, the
    squared-distance-to-epipolar-line form using the first two line components.
    Rows where both line normals vanish get DISTANCE_SENTINEL.
    """
    e = np.asarray(e, dtype=np.float64)
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    p_t = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    ph = np.column_stack([p[:, 0], p[:, 1], np.ones(len(p))])
    pth = np.column_stack([p_t[:, 0], p_t[:, 1], np.ones(len(p_t))])
    ep = ph @ e.T            # rows are E p
    etp = pth @ e            # rows are E^T pt
    residual = np.einsum("ij,ij->i", pth, ep)
    n_right = ep[:, 0] ** 2 + ep[:, 1] ** 2
    n_left = etp[:, 0] ** 2 + etp[:, 1] ** 2
    both_zero = (n_right < _NORMAL_FLOOR) & (n_left < _NORMAL_FLOOR)
    d = residual**2 * (
        1.0 / np.maximum(n_left, _NORMAL_FLOOR)
        + 1.0 / np.maximum(n_right, _NORMAL_FLOOR)
    )
    d[both_zero] = DISTANCE_SENTINEL
    return d


def symmetric_epipolar_distance(e: np.ndarray, p: np.ndarray, p_t: np.ndarray) -> float:
    """Symmetric epipolar distance of a single correspondence."""
    p = as_homogeneous(p)[:2]
    p_t = as_homogeneous(p_t)[:2]
    return float(symmetric_epipolar_distances(e, p[None, :], p_t[None, :])[0])
