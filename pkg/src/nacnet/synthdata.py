"""Deterministic synthetic two-view scenes, the line-fitting task, and scene files.

Generation is a pure function of (params, seed) built on the Philox
counter-based generator, so scenes are reproducible across platforms.  Inlier
labels are assigned by construction and verified against the optimal-
correction labeler at tau = 3e-3; rows that disagree are resampled, which
keeps generated labels and recomputed labels consistent.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ChecksumMismatch, IoError, ParamError, ResampleExhausted, VersionMismatch
from .geometry import essential_from_pose
from .triangulation import DEFAULT_LABEL_TAU, label_by_otm

SCENE_MAGIC = b"NACS"
SCENE_VERSION = 1

_DEPTH_RANGE = (2.0, 6.0)
_TRANS_MAX_NORM = 1.0
_MIN_DEPTH_VIEW2 = 0.5
_MAX_ATTEMPTS = 100

# Regimes mirroring the outlier statistics of real two-view datasets.
DEFAULT_OUTLIER_FRACS = (0.7, 0.8, 0.9, 0.95)
DEFAULT_SIGMAS = (5e-4, 1e-3, 2e-3)


@dataclass(frozen=True)
class SceneParams:
    n_points: int
    outlier_frac: float = 0.9
    noise_sigma: float = 1e-3
    rot_max_deg: float = 30.0
    trans_min_norm: float = 0.5
    fov_box: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ParamError("n_points must be positive")
        if not 0.0 <= self.outlier_frac <= 1.0:
            raise ParamError("outlier_frac must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ParamError("noise_sigma must be nonnegative")
        if self.trans_min_norm < 1e-3:
            raise ParamError("trans_min_norm must be at least 1e-3")
        if self.fov_box <= 0.0:
            raise ParamError("fov_box must be positive")


@dataclass
class Scene:
    """Match rows, labels, clean inlier positions, and the generating pose."""

    x: np.ndarray          # (n, 4) match rows (p, q, pt, qt)
    y: np.ndarray          # (n,) uint8 labels, 1 = inlier
    x_bar: np.ndarray      # (n, 4) noise-free positions; equals x on outlier rows
    r_gt: np.ndarray
    t_gt: np.ndarray
    e_gt: np.ndarray
    params: SceneParams
    seed: int


def random_pose(rng, rot_max_deg: float, trans_min_norm: float):
    """Rotation axis uniform on the sphere, angle uniform up to the cap;
    translation direction uniform with norm uniform in [min, 1]."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, rot_max_deg))
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    r = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(trans_min_norm, _TRANS_MAX_NORM)
    return r, t


def _sample_inliers(rng, r, t, e_gt, count, sigma, box):
    """Visible, noise-injected inlier rows whose labels survive the labeler."""
    clean = np.empty((count, 4))
    noisy = np.empty((count, 4))
    have = 0
    for _ in range(_MAX_ATTEMPTS):
        if have >= count:
            break
        need = count - have
        batch = max(2 * need, 16)
        p = rng.uniform(-0.95 * box, 0.95 * box, (batch, 2))
        z = rng.uniform(_DEPTH_RANGE[0], _DEPTH_RANGE[1], batch)
        points = np.column_stack([p * z[:, None], z])
        view2 = points @ r.T + t
        visible = view2[:, 2] > _MIN_DEPTH_VIEW2
        pt = np.full((batch, 2), np.inf)
        pt[visible] = view2[visible, :2] / view2[visible, 2:]
        visible &= (np.abs(pt) <= box).all(axis=1)
        rows_clean = np.column_stack([p, pt])[visible]
        if len(rows_clean) == 0:
            continue
        rows_noisy = rows_clean + rng.normal(0.0, sigma, rows_clean.shape)
        labels = label_by_otm(e_gt, rows_noisy, tau=DEFAULT_LABEL_TAU)
        rows_clean = rows_clean[labels == 1]
        rows_noisy = rows_noisy[labels == 1]
        take = min(len(rows_clean), need)
        clean[have : have + take] = rows_clean[:take]
        noisy[have : have + take] = rows_noisy[:take]
        have += take
    if have < count:
        raise ResampleExhausted(
            f"could not place {count} inliers after {_MAX_ATTEMPTS} rounds"
        )
    return clean, noisy


def _sample_outliers(rng, e_gt, count, box):
    """Uniform draws in both views, rejecting accidentally consistent rows."""
    rows = np.empty((count, 4))
    have = 0
    for _ in range(_MAX_ATTEMPTS):
        if have >= count:
            break
        need = count - have
        batch = max(2 * need, 16)
        cand = rng.uniform(-box, box, (batch, 4))
        labels = label_by_otm(e_gt, cand, tau=DEFAULT_LABEL_TAU)
        cand = cand[labels == 0]
        take = min(len(cand), need)
        rows[have : have + take] = cand[:take]
        have += take
    if have < count:
        raise ResampleExhausted(
            f"could not place {count} outliers after {_MAX_ATTEMPTS} rounds"
        )
    return rows


def gen_scene(params: SceneParams) -> Scene:
    """Generate one scene; a pure function of params (including its seed)."""
    rng = np.random.Generator(np.random.Philox(params.seed))
    r, t = random_pose(rng, params.rot_max_deg, params.trans_min_norm)
    e_gt = essential_from_pose(r, t)
    n = params.n_points
    n_out = int(round(params.outlier_frac * n))
    n_in = n - n_out

    x = np.empty((n, 4))
    x_bar = np.empty((n, 4))
    y = np.zeros(n, dtype=np.uint8)
    if n_in:
        clean, noisy = _sample_inliers(
            rng, r, t, e_gt, n_in, params.noise_sigma, params.fov_box
        )
        x[:n_in] = noisy
        x_bar[:n_in] = clean
        y[:n_in] = 1
    if n_out:
        outliers = _sample_outliers(rng, e_gt, n_out, params.fov_box)
        x[n_in:] = outliers
        x_bar[n_in:] = outliers
    perm = rng.permutation(n)
    return Scene(x[perm], y[perm], x_bar[perm], r, t, e_gt, params, params.seed)


def gen_scenes(params: SceneParams, count: int, base_seed: int | None = None) -> list[Scene]:
    """A list of scenes with consecutive derived seeds (base_seed + i)."""
    base = params.seed if base_seed is None else base_seed
    return [gen_scene(replace(params, seed=base + i)) for i in range(count)]


def denoised_variant(scene):
    """Copy with inlier rows replaced by their noise-free positions.

    Works for both two-view scenes and line tasks (same field layout).
    """
    x = scene.x.copy()
    mask = scene.y == 1
    x[mask] = scene.x_bar[mask]
    return replace(scene, x=x)


# -- line-fitting task ---------------------------------------------------------

@dataclass
class LineScene:
    """2D analogue of a scene: points, labels, clean positions, line model."""

    x: np.ndarray          # (n, 2) points
    y: np.ndarray          # (n,) uint8 labels
    x_bar: np.ndarray      # (n, 2) on-line positions for inliers
    line_gt: np.ndarray    # (a, b, c) with unit normal
    sigma: float
    seed: int


def gen_line_task(
    n_in: int = 100, n_out: int = 900, sigma: float = 0.02, seed: int = 0
) -> LineScene:
    """Noisy points on a random line through the unit box plus uniform clutter."""
    if n_in < 2:
        raise ParamError("need at least two inliers to define the task")
    if n_out < 0 or sigma < 0:
        raise ParamError("n_out and sigma must be nonnegative")
    rng = np.random.Generator(np.random.Philox(seed))
    phi = rng.uniform(0.0, np.pi)
    normal = np.array([np.cos(phi), np.sin(phi)])
    direction = np.array([-normal[1], normal[0]])
    anchor = rng.uniform(-0.5, 0.5, 2)
    line = np.array([normal[0], normal[1], -float(normal @ anchor)])

    clean = np.empty((n_in, 2))
    have = 0
    for _ in range(_MAX_ATTEMPTS):
        if have >= n_in:
            break
        cand = anchor + rng.uniform(-1.5, 1.5, (2 * (n_in - have), 1)) * direction
        cand = cand[(np.abs(cand) <= 1.0).all(axis=1)]
        take = min(len(cand), n_in - have)
        clean[have : have + take] = cand[:take]
        have += take
    if have < n_in:
        raise ResampleExhausted("line through the box is too short to sample")
    noisy = clean + rng.normal(0.0, sigma, n_in)[:, None] * normal

    x = np.concatenate([noisy, rng.uniform(-1.0, 1.0, (n_out, 2))])
    x_bar = np.concatenate([clean, x[n_in:]])
    y = np.zeros(n_in + n_out, dtype=np.uint8)
    y[:n_in] = 1
    perm = rng.permutation(n_in + n_out)
    return LineScene(x[perm], y[perm], x_bar[perm], line, sigma, seed)


# -- scene files ----------------------------------------------------------------

def _scene_payload(scene: Scene) -> bytes:
    p = scene.params
    n = scene.x.shape[0]
    head = struct.pack(
        "<QIdddddI",
        scene.seed & 0xFFFFFFFFFFFFFFFF,
        p.n_points, p.outlier_frac, p.noise_sigma, p.rot_max_deg,
        p.trans_min_norm, p.fov_box, n,
    )
    body = b"".join([
        np.ascontiguousarray(scene.x, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.y, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(scene.x_bar, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.r_gt, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.t_gt, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.e_gt, dtype="<f8").tobytes(),
    ])
    return head + body


def _parse_payload(payload: bytes) -> Scene:
    head_size = struct.calcsize("<QIdddddI")
    seed, n_points, frac, sigma, rot_max, tmin, fov, n = struct.unpack(
        "<QIdddddI", payload[:head_size]
    )
    params = SceneParams(
        n_points=n_points, outlier_frac=frac, noise_sigma=sigma,
        rot_max_deg=rot_max, trans_min_norm=tmin, fov_box=fov, seed=seed,
    )
    offset = head_size

    def take(count, dtype):
        nonlocal offset
        itemsize = np.dtype(dtype).itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        offset += count * itemsize
        return arr

    x = take(n * 4, "<f8").reshape(n, 4).copy()
    y = take(n, np.uint8).copy()
    x_bar = take(n * 4, "<f8").reshape(n, 4).copy()
    r = take(9, "<f8").reshape(3, 3).copy()
    t = take(3, "<f8").copy()
    e = take(9, "<f8").reshape(3, 3).copy()
    return Scene(x, y, x_bar, r, t, e, params, seed)


def write_scenes(path, scenes: list[Scene], manifest: bool = True) -> None:
    """Write scenes with per-scene checksums plus a key=value manifest sidecar."""
    try:
        with open(path, "wb") as fh:
            fh.write(SCENE_MAGIC)
            fh.write(struct.pack("<II", SCENE_VERSION, len(scenes)))
            for scene in scenes:
                payload = _scene_payload(scene)
                fh.write(struct.pack("<I", len(payload)))
                fh.write(payload)
                fh.write(struct.pack("<I", zlib.crc32(payload)))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if manifest and scenes:
        p = scenes[0].params
        lines = [
            f"format_version={SCENE_VERSION}",
            f"scene_count={len(scenes)}",
            f"params.n_points={p.n_points}",
            f"params.outlier_frac={p.outlier_frac!r}",
            f"params.noise_sigma={p.noise_sigma!r}",
            f"params.rot_max_deg={p.rot_max_deg!r}",
            f"params.trans_min_norm={p.trans_min_norm!r}",
            f"params.fov_box={p.fov_box!r}",
        ]
        lines += [f"scene_{i}.seed={s.seed}" for i, s in enumerate(scenes)]
        try:
            with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from exc


def read_scenes(path) -> list[Scene]:
    """Read a scene file; raises VersionMismatch or ChecksumMismatch when invalid."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    with fh:
        header = fh.read(12)
        if len(header) != 12 or header[:4] != SCENE_MAGIC:
            raise IoError("not a scene file (bad magic)")
        version, count = struct.unpack("<II", header[4:])
        if version != SCENE_VERSION:
            raise VersionMismatch(f"scene file version {version}, expected {SCENE_VERSION}")
        scenes = []
        for i in range(count):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise ChecksumMismatch(f"scene {i}: file truncated")
            (length,) = struct.unpack("<I", raw_len)
            payload = fh.read(length)
            raw_crc = fh.read(4)
            if len(payload) != length or len(raw_crc) != 4:
                raise ChecksumMismatch(f"scene {i}: file truncated")
            (crc,) = struct.unpack("<I", raw_crc)
            if zlib.crc32(payload) != crc:
                raise ChecksumMismatch(f"scene {i}: checksum mismatch")
            scenes.append(_parse_payload(payload))
    return scenes
