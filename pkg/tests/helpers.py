"""Shared construction helpers for the test suite."""

import numpy as np

from nacnet.geometry import essential_from_pose


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


def random_rotation(rng, max_angle_deg=180.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_pose(rng, max_angle_deg=60.0):
    r = random_rotation(rng, max_angle_deg)
    t = rng.standard_normal(3)
    t /= np.linalg.norm(t)
    t *= rng.uniform(0.5, 1.0)
    return r, t


def exact_pairs(r, t, n, rng, depth=(2.0, 6.0), box=0.8):
    """Rows (p, q, pt, qt) of exact projections visible in both cameras.

    First-view points are sampled uniformly over the image box so the
    epipolar design rows stay well conditioned.
    """
    rows = np.empty((n, 4))
    count = 0
    while count < n:
        p = rng.uniform(-box, box, 2)
        z = rng.uniform(depth[0], depth[1])
        point = np.array([p[0] * z, p[1] * z, z])
        q2 = r @ point + t
        if q2[2] <= 0.1 or np.abs(q2[:2] / q2[2]).max() > 1.0:
            continue
        rows[count] = [p[0], p[1], q2[0] / q2[2], q2[1] / q2[2]]
        count += 1
    return rows


def random_scene_matrix(rng, n=20, max_angle_deg=60.0):
    r, t = random_pose(rng, max_angle_deg)
    e = essential_from_pose(r, t)
    return r, t, e, exact_pairs(r, t, n, rng)
