"""Independent reference computations the tests check the library against.

Every oracle here deliberately avoids the code path it verifies: the
correction oracle sweeps the epipolar pencil by line angle with explicit
point-to-line distances, the projection oracle searches the (R, t)
parameterization directly, and gradients come from central differences.
"""

import numpy as np

_N_SWEEP = 1_000_000
_THETA = np.linspace(0.0, np.pi, _N_SWEEP, endpoint=False)
_DIRS = np.stack([np.cos(_THETA), np.sin(_THETA), np.zeros(_N_SWEEP)])
_TAN_GRID = np.tan(np.linspace(-np.pi / 2, np.pi / 2, _N_SWEEP + 2)[1:-1])


def _dist2_point_line(px, py, lines):
    """Squared distance from (px, py) to homogeneous lines of shape (3, n)."""
    num = (lines[0] * px + lines[1] * py + lines[2]) ** 2
    den = lines[0] ** 2 + lines[1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.inf)


def sweep_min_cost(e, p, pt, samples=_N_SWEEP):
    """Min over a dense pencil sweep of d(p, l)^2 + d(pt, l')^2.

    Epipolar lines in image 1 are enumerated through the right epipole by
    direction angle; each maps to its mate l' = E x for any x on l.
    """
    e = np.asarray(e, dtype=np.float64)
    e = e / np.linalg.norm(e)
    u, _, vt = np.linalg.svd(e)
    er = vt[2]
    if samples == _N_SWEEP:
        dirs = _DIRS
    else:
        th = np.linspace(0.0, np.pi, samples, endpoint=False)
        dirs = np.stack([np.cos(th), np.sin(th), np.zeros(samples)])
    if abs(er[2]) > 1e-12 * np.hypot(er[0], er[1]):
        # Pencil through a finite epipole: l = er x d, mate from the ideal point d.
        lines1 = np.stack([
            er[1] * dirs[2] - er[2] * dirs[1],
            er[2] * dirs[0] - er[0] * dirs[2],
            er[0] * dirs[1] - er[1] * dirs[0],
        ])
        lines2 = e @ dirs
    else:
        # Epipole at infinity: parallel pencil with free offset.
        c = _TAN_GRID if samples == _N_SWEEP else np.tan(
            np.linspace(-np.pi / 2, np.pi / 2, samples + 2)[1:-1])
        ones = np.ones_like(c)
        lines1 = np.stack([-er[1] * ones, er[0] * ones, c])
        pts = np.stack([er[1] * c, -er[0] * c, (er[0] ** 2 + er[1] ** 2) * ones])
        lines2 = e @ pts
    cost = _dist2_point_line(p[0], p[1], lines1) + _dist2_point_line(pt[0], pt[1], lines2)
    return float(np.min(cost))


def nearest_essential_search_cost(m, iterations=60, grid=9):
    """Coarse-to-fine search of min over s, R, t of ||m/s - [t]x R||_F^2.

    For a fixed unit-scale candidate E the scale optimum is closed-form:
    cost(E) = ||E||^2 - tr(m' E)^2 / ||m||^2.  The search walks a shrinking
    grid over axis-angle rotations and sphere directions.
    """
    m = np.asarray(m, dtype=np.float64)
    m2 = float(np.sum(m * m))

    def cost(w, d):
        angle = np.linalg.norm(w)
        if angle < 1e-12:
            r = np.eye(3)
        else:
            k = w / angle
            kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
            r = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
        t = d / np.linalg.norm(d)
        tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
        e = tx @ r
        tr = float(np.sum(m * e))
        return 2.0 - tr * tr / m2

    best = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
    best_cost = cost(*best)
    span_w, span_d = np.pi, 1.0
    rng = np.random.Generator(np.random.Philox(0))
    for _ in range(iterations):
        for _ in range(grid * grid):
            w = best[0] + rng.uniform(-span_w, span_w, 3)
            d = best[1] + rng.uniform(-span_d, span_d, 3)
            if np.linalg.norm(d) < 1e-9:
                continue
            c = cost(w, d)
            if c < best_cost:
                best_cost, best = c, (w, d)
        span_w *= 0.7
        span_d *= 0.7
    return best_cost


def central_differences(f, x, h):
    """Per-coordinate central differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(x)
        xf[i] = orig - h
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_errors(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
