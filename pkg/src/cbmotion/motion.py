"""Spline-parameterized rigid motion trajectories and the reprojection error.

A motion trajectory assigns one rigid transform per acquired view.  Generated
motions are in-plane rotations about the patient longitudinal axis whose
angle over the view index follows an Akima spline; a contiguous active window
restricts motion to part of the scan, with the spline pinned to zero at the
window edges so motion starts and ends continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (ConfigurationError, ContractError, MotionGenerationError,
                     OutOfRangeError, ProjectionAtInfinityError)
from .geometry import (ProjectionMatrix, RigidMotion, ScanGeometry,
                       rotation_about_z)

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


# ---------------------------------------------------------------------------
# Akima interpolation
# ---------------------------------------------------------------------------

def _akima_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Node slopes by Akima's rule with two-point extrapolated boundaries."""
    m = np.diff(y) / np.diff(x)
    if m.size == 1:
        return np.array([m[0], m[0]])
    # Two extrapolated secants on each side (Akima 1970 boundary treatment).
    ext = np.empty(m.size + 4)
    ext[2:-2] = m
    ext[1] = 2.0 * m[0] - m[1]
    ext[0] = 2.0 * ext[1] - m[0]
    ext[-2] = 2.0 * m[-1] - m[-2]
    ext[-1] = 2.0 * ext[-2] - m[-1]
    # Slope at node i mixes the adjacent secants ext[i+1], ext[i+2] weighted
    # by the far-side secant differences.
    w_left = np.abs(ext[3:] - ext[2:-1])
    w_right = np.abs(ext[1:-2] - ext[:-3])
    denom = w_left + w_right
    with np.errstate(invalid="ignore"):
        s = (w_left * ext[1:-2] + w_right * ext[2:-1]) / denom
    fallback = 0.5 * (ext[1:-2] + ext[2:-1])
    return np.where(denom > 0.0, s, fallback)


def akima_interpolate(node_positions, node_values, query):
    """Evaluate the Akima piecewise cubic through the given nodes.

    C1-continuous, interpolates every node exactly and reproduces straight
    lines.  ``query`` may be a scalar or an array; every query must lie
    within [first, last] node position.
    """
    x = np.asarray(node_positions, dtype=float)
    y = np.asarray(node_values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ConfigurationError("at least 2 nodes are required")
    if y.shape != x.shape:
        raise ConfigurationError("node_positions and node_values differ in length")
    if np.any(np.diff(x) <= 0):
        raise ConfigurationError("node positions must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("node values must be finite")
    q = np.asarray(query, dtype=float)
    scalar = q.ndim == 0
    q = np.atleast_1d(q)
    if np.any(q < x[0]) or np.any(q > x[-1]):
        raise OutOfRangeError(
            f"query outside node range [{x[0]}, {x[-1]}]")
    slopes = _akima_slopes(x, y)
    idx = np.clip(np.searchsorted(x, q, side="right") - 1, 0, x.size - 2)
    h = x[idx + 1] - x[idx]
    t = (q - x[idx]) / h
    t2 = t * t
    t3 = t2 * t
    val = ((2 * t3 - 3 * t2 + 1) * y[idx]
           + (t3 - 2 * t2 + t) * h * slopes[idx]
           + (-2 * t3 + 3 * t2) * y[idx + 1]
           + (t3 - t2) * h * slopes[idx + 1])
    return float(val[0]) if scalar else val


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionTrajectory:
    """Per-view rigid patient motion over a whole acquisition."""

    motions: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "motions", tuple(self.motions))
        if not all(isinstance(m, RigidMotion) for m in self.motions):
            raise ContractError("trajectory elements must be RigidMotion")

    def __len__(self) -> int:
        return len(self.motions)

    @cached_property
    def matrices(self) -> np.ndarray:
        """Stacked 4x4 homogeneous forms, shape (n_views, 4, 4)."""
        return np.stack([m.as_matrix() for m in self.motions])

    def angles_deg(self) -> np.ndarray:
        return np.array([m.z_angle_deg for m in self.motions])


def identity_trajectory(n_views: int) -> MotionTrajectory:
    ident = RigidMotion.identity()
    return MotionTrajectory((ident,) * n_views)


def z_rotation_trajectory(angles_deg: Sequence[float]) -> MotionTrajectory:
    return MotionTrajectory(tuple(rotation_about_z(a) for a in angles_deg))


@dataclass(frozen=True)
class SplineMotionModel:
    """Akima-spline parameterization of z-rotation angle over view index.

    Views outside ``active_window`` (a half-open interval of view indices)
    map to the identity motion.
    """

    node_positions: np.ndarray
    node_values: np.ndarray
    active_window: tuple[int, int]
    seed: int = 0

    def __post_init__(self) -> None:
        pos = np.array(self.node_positions, dtype=float)
        val = np.array(self.node_values, dtype=float)
        if pos.ndim != 1 or pos.size < 2:
            raise ConfigurationError("at least 2 spline nodes are required")
        if val.shape != pos.shape:
            raise ConfigurationError("node value count differs from node count")
        if np.any(np.diff(pos) <= 0):
            raise ConfigurationError("node positions must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ConfigurationError("node values must be finite")
        lo, hi = self.active_window
        if hi < lo:
            raise ConfigurationError("active_window must be a non-empty interval")
        pos.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "node_positions", pos)
        object.__setattr__(self, "node_values", val)
        object.__setattr__(self, "active_window", (int(lo), int(hi)))

    @property
    def n_nodes(self) -> int:
        return self.node_positions.size

    def scaled(self, factor: float) -> "SplineMotionModel":
        return SplineMotionModel(self.node_positions,
                                 self.node_values * factor,
                                 self.active_window, self.seed)


def equally_spaced_nodes(n_nodes: int, n_views: int) -> np.ndarray:
    """Node positions equally distributed over [0, n_views - 1]."""
    if n_nodes < 2:
        raise ConfigurationError("at least 2 spline nodes are required")
    return np.linspace(0.0, n_views - 1.0, n_nodes)


def spline_angles(model: SplineMotionModel, n_views: int) -> np.ndarray:
    """Per-view rotation angle in degrees; zero outside the active window."""
    pos = model.node_positions
    if pos[0] > 0.0 or pos[-1] < n_views - 1.0:
        raise ContractError("node range must span [0, n_views - 1]")
    angles = np.zeros(n_views)
    lo, hi = model.active_window
    lo = max(lo, 0)
    hi = min(hi, n_views)
    if lo < hi:
        views = np.arange(lo, hi, dtype=float)
        angles[lo:hi] = akima_interpolate(pos, model.node_values, views)
    return angles


def spline_to_trajectory(model: SplineMotionModel, n_views: int) -> MotionTrajectory:
    """Sample the spline model at every view index.

    Views inside the active window rotate about z by the interpolated angle;
    views outside are identity.
    """
    return z_rotation_trajectory(spline_angles(model, n_views))


# ---------------------------------------------------------------------------
# Reprojection error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RpeConfig:
    """Reference-point sampling for the reprojection-error metric."""

    sphere_radius: float = 100.0
    n_points: int = 100
    sampling_seed: int = 0

    def __post_init__(self) -> None:
        if self.sphere_radius <= 0:
            raise ConfigurationError("sphere_radius must be strictly positive")
        if self.n_points < 4:
            raise ConfigurationError("n_points must be at least 4")


def sample_sphere_points(config: RpeConfig) -> np.ndarray:
    """Deterministic Fibonacci-lattice points on the sphere, shape (n, 4).

    The lattice is rotated azimuthally by the sampling seed; the same config
    always yields bit-identical points.  w = 1 for every point.
    """
    n = config.n_points
    k = np.arange(n)
    z = 1.0 - 2.0 * (k + 0.5) / n
    phi = _GOLDEN_ANGLE * (k + config.sampling_seed)
    r_xy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.empty((n, 4))
    pts[:, 0] = config.sphere_radius * r_xy * np.cos(phi)
    pts[:, 1] = config.sphere_radius * r_xy * np.sin(phi)
    pts[:, 2] = config.sphere_radius * z
    pts[:, 3] = 1.0
    return pts


def _as_point_array(points) -> np.ndarray:
    from .geometry import as_homogeneous
    a = np.asarray(points, dtype=float) if not isinstance(points, (list, tuple)) \
        else np.stack([as_homogeneous(p) for p in points])
    if a.ndim != 2 or a.shape[1] != 4 or a.shape[0] == 0:
        raise ContractError("points must be a nonempty (n, 4) array")
    return a


def _projection_stack(matrices: Sequence[ProjectionMatrix]) -> np.ndarray:
    return np.stack([p.m for p in matrices])


def _dehomogenize(h: np.ndarray, what: str) -> np.ndarray:
    """(..., 3, n) homogeneous detector coords -> (..., 2, n) pixels."""
    w = h[..., 2, :]
    if np.any(np.abs(w) < 1e-12):
        view, point = np.argwhere(np.abs(w) < 1e-12)[0]
        raise ProjectionAtInfinityError(
            f"{what}: point {point} hits the principal plane at view {view}")
    return h[..., :2, :] / w[..., None, :]


def _mean_square_displacement(pa: np.ndarray, ma: np.ndarray, mb: np.ndarray,
                              points: np.ndarray, pitch_u: float,
                              pitch_v: float) -> float:
    """Mean squared mm distance between P@Ma and P@Mb projections."""
    qa = np.einsum("nij,njk->nik", pa, ma)
    qb = np.einsum("nij,njk->nik", pa, mb)
    ha = np.einsum("nij,pj->nip", qa, points)
    hb = np.einsum("nij,pj->nip", qb, points)
    da = _dehomogenize(ha, "moved projection")
    db = _dehomogenize(hb, "reference projection")
    du = (da[:, 0, :] - db[:, 0, :]) * pitch_u
    dv = (da[:, 1, :] - db[:, 1, :]) * pitch_v
    return float(np.mean(du * du + dv * dv))


def reprojection_error(traj: MotionTrajectory,
                       matrices: Sequence[ProjectionMatrix],
                       points,
                       pixel_pitch_u: float = 1.0,
                       pixel_pitch_v: float = 1.0) -> float:
    """Mean squared detector displacement (mm) induced by a motion trajectory.

    Averages the squared 2-D distance between the projections of each
    reference point with and without the per-view motion, over all
    (point, view) pairs.  Detector pixels are converted to mm via the pixel
    pitch.  Exactly 0 for the identity trajectory.
    """
    if len(traj) != len(matrices):
        raise ContractError(
            f"trajectory has {len(traj)} views but {len(matrices)} matrices given")
    pts = _as_point_array(points)
    pa = _projection_stack(matrices)
    ident = np.broadcast_to(np.eye(4), (len(matrices), 4, 4))
    return _mean_square_displacement(pa, traj.matrices, ident, pts,
                                     pixel_pitch_u, pixel_pitch_v)


def residual_reprojection_error(true_traj: MotionTrajectory,
                                candidate: MotionTrajectory,
                                matrices: Sequence[ProjectionMatrix],
                                points,
                                pixel_pitch_u: float = 1.0,
                                pixel_pitch_v: float = 1.0) -> float:
    """Reprojection error remaining after compensating with a candidate.

    Mean squared mm distance between the true-motion and candidate-motion
    projections; 0 exactly when the candidate equals the true trajectory,
    and equal to ``reprojection_error(true_traj, ...)`` for the identity
    candidate.
    """
    if len(true_traj) != len(matrices) or len(candidate) != len(matrices):
        raise ContractError("trajectory/matrix lengths are inconsistent")
    pts = _as_point_array(points)
    pa = _projection_stack(matrices)
    return _mean_square_displacement(pa, true_traj.matrices,
                                     candidate.matrices, pts,
                                     pixel_pitch_u, pixel_pitch_v)


def residual_rpe_for_angles(angles_true: np.ndarray,
                            angle_rows: np.ndarray,
                            matrices: Sequence[ProjectionMatrix],
                            points,
                            pixel_pitch_u: float = 1.0,
                            pixel_pitch_v: float = 1.0,
                            chunk: int = 64) -> np.ndarray:
    """Residual RPE for a batch of candidate z-rotation angle rows.

    ``angle_rows`` has shape (n_rows, n_views), degrees.  Equivalent to
    calling :func:`residual_reprojection_error` on z-rotation trajectories
    row by row, but vectorized for trace annotation.
    """
    pts = _as_point_array(points)
    pa = _projection_stack(matrices)
    rows = np.atleast_2d(np.asarray(angle_rows, dtype=float))
    ht = _dehomogenize(np.einsum(
        "nij,njp->nip", pa, _rotated_points(angles_true, pts)), "true")
    out = np.empty(rows.shape[0])
    for s in range(0, rows.shape[0], chunk):
        block = rows[s:s + chunk]
        pc = _rotated_points_batch(block, pts)
        hc = _dehomogenize(np.einsum("nij,rnjp->rnip", pa, pc), "candidate")
        du = (ht[None, :, 0, :] - hc[:, :, 0, :]) * pixel_pitch_u
        dv = (ht[None, :, 1, :] - hc[:, :, 1, :]) * pixel_pitch_v
        out[s:s + chunk] = np.mean(du * du + dv * dv, axis=(1, 2))
    return out


def _rotated_points(angles_deg: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """(n_views, 4, n_points) homogeneous points rotated per view about z."""
    a = np.radians(np.asarray(angles_deg, dtype=float))
    c, s = np.cos(a), np.sin(a)
    x, y, z, w = pts.T
    out = np.empty((a.size, 4, pts.shape[0]))
    out[:, 0, :] = c[:, None] * x - s[:, None] * y
    out[:, 1, :] = s[:, None] * x + c[:, None] * y
    out[:, 2, :] = z
    out[:, 3, :] = w
    return out


def _rotated_points_batch(angle_rows: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a = np.radians(angle_rows)
    c, s = np.cos(a), np.sin(a)
    x, y, z, w = pts.T
    out = np.empty(a.shape + (4, pts.shape[0]))
    out[..., 0, :] = c[..., None] * x - s[..., None] * y
    out[..., 1, :] = s[..., None] * x + c[..., None] * y
    out[..., 2, :] = z
    out[..., 3, :] = w
    return out


# ---------------------------------------------------------------------------
# Random motion generation
# ---------------------------------------------------------------------------

def random_motion(n_views: int,
                  n_nodes: int,
                  target_rpe: float,
                  active_fraction: float,
                  seed: int,
                  geometry: ScanGeometry,
                  rpe_config: RpeConfig | None = None,
                  matrices: Sequence[ProjectionMatrix] | None = None) -> SplineMotionModel:
    """Draw a seeded random spline motion calibrated to a target RPE.

    Node values are drawn uniformly, zeroed outside a randomly placed
    contiguous active window covering ``active_fraction`` of the views (the
    window-adjacent nodes are pinned to zero as well, so motion onsets and
    offsets continuously), then rescaled by a single scalar via bisection
    until the reprojection error matches ``target_rpe`` within 1 % relative.
    """
    if not 0.0 < active_fraction <= 1.0:
        raise ConfigurationError("active_fraction must be in (0, 1]")
    if target_rpe < 0.0:
        raise ConfigurationError("target_rpe must be non-negative")
    rpe_config = rpe_config or RpeConfig()
    positions = equally_spaced_nodes(n_nodes, n_views)
    rng = np.random.default_rng(seed)

    win_len = max(1, int(round(active_fraction * n_views)))
    win_len = min(win_len, n_views)
    for _ in range(32):
        start = int(rng.integers(0, n_views - win_len + 1))
        window = (start, start + win_len)
        inside = (positions >= window[0]) & (positions < window[1])
        if inside.sum() >= 3:
            break
    else:
        raise MotionGenerationError(
            "active window too narrow to contain 3 spline nodes")

    values = rng.uniform(-1.0, 1.0, n_nodes)
    values[~inside] = 0.0
    inner = np.flatnonzero(inside)
    values[inner[0]] = 0.0
    values[inner[-1]] = 0.0

    if target_rpe == 0.0 or not np.any(values != 0.0):
        return SplineMotionModel(positions, np.zeros(n_nodes), window, seed)

    if matrices is None:
        from .geometry import make_circular_trajectory
        matrices = make_circular_trajectory(geometry)
    points = sample_sphere_points(rpe_config)

    def rpe_of(scale: float) -> float:
        model = SplineMotionModel(positions, values * scale, window, seed)
        traj = spline_to_trajectory(model, n_views)
        return reprojection_error(traj, matrices, points,
                                  geometry.pixel_pitch_u,
                                  geometry.pixel_pitch_v)

    hi = 1.0
    f_hi = rpe_of(hi)
    grow = 0
    while f_hi < target_rpe:
        hi *= 2.0
        grow += 1
        if grow > 24 or hi * np.abs(values).max() > 170.0:
            raise MotionGenerationError(
                f"cannot reach target RPE {target_rpe} by scaling")
        f_hi = rpe_of(hi)
    lo, f_lo = 0.0, 0.0
    scale, f_mid = hi, f_hi
    for _ in range(50):
        if abs(f_mid - target_rpe) <= 0.01 * target_rpe:
            break
        mid = 0.5 * (lo + hi)
        f_mid = rpe_of(mid)
        scale = mid
        if f_mid < target_rpe:
            lo = mid
        else:
            hi = mid
    else:
        raise MotionGenerationError(
            f"bisection did not converge to RPE {target_rpe} in 50 steps")
    return SplineMotionModel(positions, values * scale, window, seed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_motion_model(model: SplineMotionModel, path) -> None:
    """Plain-text key-value document for a spline motion model."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("node_positions = " + ",".join(
            format(v, ".17g") for v in model.node_positions) + "\n")
        fh.write("node_values = " + ",".join(
            format(v, ".17g") for v in model.node_values) + "\n")
        fh.write(f"active_window = {model.active_window[0]},{model.active_window[1]}\n")
        fh.write(f"seed = {model.seed}\n")


def load_motion_model(path) -> SplineMotionModel:
    fields: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"malformed motion model line: {line!r}")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        pos = np.array([float(v) for v in fields["node_positions"].split(",")])
        val = np.array([float(v) for v in fields["node_values"].split(",")])
        lo, hi = (int(v) for v in fields["active_window"].split(","))
        seed = int(fields.get("seed", "0"))
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"invalid motion model file: {exc}") from exc
    return SplineMotionModel(pos, val, (lo, hi), seed)


def trajectory_to_csv(traj: MotionTrajectory, path) -> None:
    """CSV export: view index, z-angle degrees, 12 rigid-matrix entries."""
    with open(path, "w", encoding="ascii") as fh:
        for i, m in enumerate(traj.motions):
            entries = np.column_stack([m.rotation, m.translation]).ravel()
            fh.write(f"{i},{format(m.z_angle_deg, '.17g')},"
                     + ",".join(format(v, ".17g") for v in entries) + "\n")
