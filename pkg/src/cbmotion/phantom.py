"""Analytic ellipsoid head phantom and exact cone-beam forward projection.

Densities are additive attenuation values in arbitrary units; the documented
display map to Hounsfield-like numbers is HU = 1000 * value, so the default
display window [0.5, 2.0] corresponds to a [500, 2000] HU window.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FileFormatError
from .geometry import (ProjectionMatrix, ScanGeometry, view_frame)
from .motion import MotionTrajectory

STACK_MAGIC = b"CBPS"
STACK_VERSION = 1


@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid: center mm, semi-axes mm, rotation about z, density."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    z_rotation: float = 0.0
    density: float = 1.0

    def __post_init__(self) -> None:
        if any(a <= 0 for a in self.semi_axes):
            raise ConfigurationError("semi-axes must be strictly positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(v) for v in self.semi_axes))

    def world_to_unit(self) -> np.ndarray:
        """3x3 map taking world offsets into the unit-sphere frame."""
        a = np.radians(self.z_rotation)
        c, s = np.cos(a), np.sin(a)
        rot_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        return np.diag(1.0 / np.asarray(self.semi_axes)) @ rot_inv

    def max_extent(self) -> float:
        return float(np.linalg.norm(self.center) + max(self.semi_axes))


@dataclass(frozen=True)
class Phantom:
    """A nonempty collection of additive ellipsoids."""

    ellipsoids: tuple

    def __post_init__(self) -> None:
        ells = tuple(self.ellipsoids)
        if not ells:
            raise ConfigurationError("phantom needs at least one ellipsoid")
        if not all(isinstance(e, Ellipsoid) for e in ells):
            raise ContractError("phantom elements must be Ellipsoid")
        object.__setattr__(self, "ellipsoids", ells)

    def max_extent(self) -> float:
        return max(e.max_extent() for e in self.ellipsoids)


@dataclass(frozen=True)
class ProjectionStack:
    """Line-integral data: (n_views, detector_rows, detector_cols)."""

    data: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=float)
        g = self.geometry
        if d.shape != (g.n_views, g.detector_rows, g.detector_cols):
            raise ContractError(
                f"stack shape {d.shape} does not match geometry "
                f"({g.n_views}, {g.detector_rows}, {g.detector_cols})")
        if not np.all(np.isfinite(d)):
            raise ContractError("stack contains non-finite values")
        object.__setattr__(self, "data", d)


# ---------------------------------------------------------------------------
# Ray integrals
# ---------------------------------------------------------------------------

def _chord_lengths(ell: Ellipsoid, origins: np.ndarray,
                   directions: np.ndarray) -> np.ndarray:
    """Chord length of each unit-direction ray through one ellipsoid."""
    m = ell.world_to_unit()
    o = (origins - np.asarray(ell.center)) @ m.T
    d = directions @ m.T
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - 1.0
    disc = b * b - 4.0 * a * c
    out = np.zeros(origins.shape[0])
    hit = disc > 0.0
    out[hit] = np.sqrt(disc[hit]) / a[hit]
    return out


def ray_integral(phantom: Phantom, origin, direction) -> float:
    """Exact line integral of the phantom along one ray.

    ``direction`` must be a unit vector; the value is the sum over
    ellipsoids of density times chord length (0 where the ray misses).
    """
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-9:
        raise ContractError("ray direction must be normalized")
    total = 0.0
    for ell in phantom.ellipsoids:
        total += ell.density * _chord_lengths(ell, o, d)[0]
    return float(total)


def forward_project(phantom: Phantom,
                    matrices: Sequence[ProjectionMatrix],
                    geometry: ScanGeometry,
                    motion: MotionTrajectory | None = None) -> ProjectionStack:
    """Analytic cone-beam projection of the phantom, optionally with motion.

    For view i the ray through each detector pixel center is integrated
    against the phantom transformed by the view's rigid motion (implemented
    by inverse-transforming the ray).  Without motion the phantom is static.
    """
    g = geometry
    if len(matrices) != g.n_views:
        raise ContractError("matrix count does not match geometry.n_views")
    if motion is not None and len(motion) != g.n_views:
        raise ContractError("motion length does not match geometry.n_views")
    if phantom.max_extent() >= g.source_axis_distance / 2.0:
        raise ConfigurationError(
            "phantom does not fit inside the scanner field of view")

    u_off = (np.arange(g.detector_cols) - g.detector_center_u) * g.pixel_pitch_u
    v_off = (np.arange(g.detector_rows) - g.detector_center_v) * g.pixel_pitch_v
    vv, uu = np.meshgrid(v_off, u_off, indexing="ij")
    n_pix = g.detector_rows * g.detector_cols

    data = np.empty((g.n_views, g.detector_rows, g.detector_cols))
    for i in range(g.n_views):
        source, u_hat, v_hat, d_hat = view_frame(g, i)
        targets = (source
                   + g.source_detector_distance * d_hat
                   + uu.ravel()[:, None] * u_hat
                   + vv.ravel()[:, None] * v_hat)
        dirs = targets - source
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        origins = np.broadcast_to(source, (n_pix, 3))
        if motion is not None:
            rot_t = motion.motions[i].rotation.T
            origins = (origins - motion.motions[i].translation) @ rot_t.T
            dirs = dirs @ rot_t.T
        view = np.zeros(n_pix)
        for ell in phantom.ellipsoids:
            view += ell.density * _chord_lengths(ell, origins, dirs)
        data[i] = view.reshape(g.detector_rows, g.detector_cols)
    return ProjectionStack(data, g)


def render_slice(phantom: Phantom, grid_size: int, fov_mm: float, z: float = 0.0):
    """Ground-truth axial slice: sum of densities containing each pixel center."""
    from .recon import SliceImage, slice_grid_coords
    if grid_size < 8:
        raise ConfigurationError("grid_size must be at least 8")
    xs, ys = slice_grid_coords(grid_size, fov_mm)
    xx = np.broadcast_to(xs[None, :], (grid_size, grid_size))
    yy = np.broadcast_to(ys[:, None], (grid_size, grid_size))
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])
    img = np.zeros(xx.size)
    for ell in phantom.ellipsoids:
        q = (pts - np.asarray(ell.center)) @ ell.world_to_unit().T
        img += ell.density * (np.einsum("ij,ij->i", q, q) <= 1.0)
    return SliceImage(img.reshape(grid_size, grid_size), fov_mm, z)


# ---------------------------------------------------------------------------
# Default phantom and file formats
# ---------------------------------------------------------------------------

_BASE_ELLIPSOIDS = (
    # cx, cy, cz, ax, ay, az, zrot, density
    (0.0, 0.0, 0.0, 72.0, 58.0, 85.0, 0.0, 2.0),     # skull
    (0.0, 0.0, 0.0, 66.0, 52.0, 78.0, 0.0, -1.2),    # brain cavity
    (28.0, 8.0, 0.0, 11.0, 8.0, 13.0, 25.0, 0.55),
    (-24.0, 16.0, 0.0, 8.0, 11.0, 11.0, -40.0, -0.45),
    (6.0, -28.0, 0.0, 13.0, 7.0, 9.0, 60.0, 0.4),
    (-10.0, -14.0, 0.0, 5.0, 5.0, 8.0, 0.0, 0.85),
    (16.0, -6.0, 0.0, 4.0, 6.0, 7.0, 110.0, -0.6),
    (0.0, 24.0, 0.0, 15.0, 6.0, 10.0, 0.0, -0.35),
)


def make_head_phantom(variant: int = 0) -> Phantom:
    """Two-level head phantom with contrast inserts.

    Variant 0 is the canonical checked-in phantom; other variants apply a
    deterministic jitter to the insert positions, sizes, rotations and
    densities so datasets can hold out a phantom the network never saw.
    """
    rows = [list(r) for r in _BASE_ELLIPSOIDS]
    if variant != 0:
        rng = np.random.default_rng(901_000 + variant)
        # brain shape varies mildly; the skull stays put so every variant
        # fits the detector fan
        for k in (3, 4):
            rows[1][k] *= rng.uniform(0.96, 1.04)
        for row in rows[2:]:
            row[0] += rng.uniform(-6.0, 6.0)
            row[1] += rng.uniform(-6.0, 6.0)
            for k in (3, 4, 5):
                row[k] *= rng.uniform(0.85, 1.15)
            row[6] += rng.uniform(-25.0, 25.0)
            row[7] *= rng.uniform(0.8, 1.2)
    return Phantom(tuple(
        Ellipsoid(center=(r[0], r[1], r[2]), semi_axes=(r[3], r[4], r[5]),
                  z_rotation=r[6], density=r[7]) for r in rows))


def save_phantom(phantom: Phantom, path) -> None:
    """Plain-text phantom definition, one ellipsoid record per line."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# cx cy cz  ax ay az  zrot_deg  density\n")
        for e in phantom.ellipsoids:
            vals = (*e.center, *e.semi_axes, e.z_rotation, e.density)
            fh.write("  ".join(format(v, ".17g") for v in vals) + "\n")


def load_phantom(path) -> Phantom:
    ells = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ConfigurationError(
                    f"{path}:{ln}: expected 8 values per ellipsoid record")
            v = [float(p) for p in parts]
            ells.append(Ellipsoid(center=(v[0], v[1], v[2]),
                                  semi_axes=(v[3], v[4], v[5]),
                                  z_rotation=v[6], density=v[7]))
    return Phantom(tuple(ells))


def save_projection_stack(stack: ProjectionStack, path) -> None:
    """Binary stack file: 16-byte header + little-endian float32 samples."""
    g = stack.geometry
    if g.n_views > 0xFFFF:
        raise ContractError("stack file format supports at most 65535 views")
    header = struct.pack("<4sHHII", STACK_MAGIC, STACK_VERSION,
                         g.n_views, g.detector_rows, g.detector_cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def load_projection_stack(path, geometry: ScanGeometry) -> ProjectionStack:
    """Read a stack file; the geometry sidecar must match the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FileFormatError("stack file truncated (no header)")
    magic, version, n_views, rows, cols = struct.unpack("<4sHHII", raw[:16])
    if magic != STACK_MAGIC:
        raise FileFormatError("not a projection stack file (bad magic)")
    if version != STACK_VERSION:
        raise FileFormatError(f"unsupported stack file version {version}")
    expect = (geometry.n_views, geometry.detector_rows, geometry.detector_cols)
    if (n_views, rows, cols) != expect:
        raise FileFormatError(
            f"stack header {(n_views, rows, cols)} does not match geometry {expect}")
    n = n_views * rows * cols
    if len(raw) != 16 + 4 * n:
        raise FileFormatError("stack file truncated (payload size mismatch)")
    data = np.frombuffer(raw, dtype="<f4", offset=16).astype(float)
    return ProjectionStack(data.reshape(n_views, rows, cols), geometry)
