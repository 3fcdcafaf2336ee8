"""Projective acquisition geometry for a circular cone-beam scan.

World coordinates are millimetres with the isocenter at the origin and the
rotation axis along +z (the patient longitudinal axis).  View angles increase
counter-clockwise when viewed from +z; at angle 0 the source sits on the +y
axis.  Detector pixel coordinates (u, v) are continuous with pixel centers at
integer positions, u along the in-plane (tangential) direction and v along +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ProjectionAtInfinityError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class ScanGeometry:
    """Circular cone-beam acquisition parameters.

    ``angular_range`` defaults to a full rotation minus one angular step so
    that the first and last views do not coincide.  All distances are mm.
    """

    n_views: int = 180
    source_axis_distance: float = 750.0
    source_detector_distance: float = 1200.0
    detector_rows: int = 64
    detector_cols: int = 256
    pixel_pitch_u: float = 1.0
    pixel_pitch_v: float = 1.0
    angular_range: float | None = None
    start_angle: float = 0.0

    def __post_init__(self) -> None:
        if self.n_views < 2:
            raise ConfigurationError("n_views must be >= 2")
        for name in ("source_axis_distance", "source_detector_distance",
                     "pixel_pitch_u", "pixel_pitch_v"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if self.source_detector_distance <= self.source_axis_distance:
            raise ConfigurationError(
                "source_detector_distance must exceed source_axis_distance")
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise ConfigurationError("detector grid must be at least 1x1")
        if self.angular_range is None:
            object.__setattr__(
                self, "angular_range", 360.0 * (self.n_views - 1) / self.n_views)
        if self.angular_range <= 0:
            raise ConfigurationError("angular_range must be strictly positive")

    @property
    def detector_center_u(self) -> float:
        return (self.detector_cols - 1) / 2.0

    @property
    def detector_center_v(self) -> float:
        return (self.detector_rows - 1) / 2.0

    @property
    def angular_step_deg(self) -> float:
        """Angle between consecutive views, degrees."""
        return self.angular_range / (self.n_views - 1)

    def view_angles_deg(self) -> np.ndarray:
        return self.start_angle + self.angular_step_deg * np.arange(self.n_views)


@dataclass(frozen=True)
class ProjectionMatrix:
    """3x4 homogeneous mapping from world mm to detector pixel coordinates."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=float)
        if m.shape != (3, 4):
            raise ConfigurationError("projection matrix must be 3x4")
        if abs(np.linalg.det(m[:, :3])) < 1e-12:
            raise ConfigurationError(
                "left 3x3 submatrix is rank deficient (not a finite camera)")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)


@dataclass(frozen=True)
class RigidMotion:
    """An SE(3) transform: proper rotation plus translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ConfigurationError("rotation must be 3x3")
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
            raise ConfigurationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ConfigurationError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidMotion":
        rt = self.rotation.T
        return RigidMotion(rt, -rt @ self.translation)

    @property
    def z_angle_deg(self) -> float:
        """In-plane rotation angle, degrees (exact for pure z-rotations)."""
        return math.degrees(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True)
class HomogeneousPoint:
    """A point of projective 3-space; (x, y, z) in mm when w = 1."""

    coords: np.ndarray

    def __post_init__(self) -> None:
        c = np.array(self.coords, dtype=float).reshape(4)
        if not np.any(c != 0.0):
            raise ConfigurationError("homogeneous point must be nonzero")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)


def as_homogeneous(x) -> np.ndarray:
    """Coerce a HomogeneousPoint, 3-vector (w=1 appended) or 4-vector."""
    if isinstance(x, HomogeneousPoint):
        return x.coords
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.size == 3:
        return np.append(a, 1.0)
    if a.size != 4:
        raise ContractError("point must have 3 or 4 components")
    return a


def view_frame(geometry: ScanGeometry, view: int | float):
    """Source position and detector axes for one view.

    Returns (source, u_hat, v_hat, d_hat) where d_hat is the unit principal
    ray direction from the source towards the isocenter.
    """
    theta = math.radians(geometry.start_angle + geometry.angular_step_deg * view)
    s, c = math.sin(theta), math.cos(theta)
    source = geometry.source_axis_distance * np.array([-s, c, 0.0])
    u_hat = np.array([c, s, 0.0])
    v_hat = np.array([0.0, 0.0, 1.0])
    d_hat = np.array([s, -c, 0.0])
    return source, u_hat, v_hat, d_hat


def make_circular_trajectory(geometry: ScanGeometry) -> list[ProjectionMatrix]:
    """Projection matrices of the circular scan, one per view.

    Each matrix is normalized so its third row applied to the isocenter
    yields 1; the isocenter projects to the detector center pixel
    ((cols-1)/2, (rows-1)/2) at every view.
    """
    sad = geometry.source_axis_distance
    sdd = geometry.source_detector_distance
    k = np.array([
        [sdd / geometry.pixel_pitch_u, 0.0, geometry.detector_center_u],
        [0.0, sdd / geometry.pixel_pitch_v, geometry.detector_center_v],
        [0.0, 0.0, 1.0],
    ])
    matrices = []
    for i in range(geometry.n_views):
        source, u_hat, v_hat, d_hat = view_frame(geometry, i)
        r = np.vstack([u_hat, v_hat, d_hat])
        rt = np.column_stack([r, -r @ source])
        matrices.append(ProjectionMatrix(k @ rt / sad))
    return matrices


def project(p: ProjectionMatrix, x) -> tuple[float, float]:
    """Dehomogenized detector coordinates (u, v) in pixels of a world point."""
    h = p.m @ as_homogeneous(x)
    if abs(h[2]) < 1e-300:
        raise ProjectionAtInfinityError(
            "point lies on the camera principal plane")
    return float(h[0] / h[2]), float(h[1] / h[2])


def rotation_about_z(angle_deg: float) -> RigidMotion:
    """Right-handed rotation about the world z-axis, zero translation."""
    if not math.isfinite(angle_deg):
        raise ContractError("rotation angle must be finite")
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidMotion(r, np.zeros(3))


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """Group product: the transform applying b first, then a."""
    return RigidMotion(a.rotation @ b.rotation,
                       a.rotation @ b.translation + a.translation)


def apply(m: RigidMotion, x) -> np.ndarray:
    """Apply a rigid motion to a homogeneous point; preserves the w component."""
    h = as_homogeneous(x)
    out = np.empty(4)
    out[:3] = m.rotation @ h[:3] + h[3] * m.translation
    out[3] = h[3]
    return out


def compose_projection(p: ProjectionMatrix, m: RigidMotion) -> ProjectionMatrix:
    """The motion-aware camera P @ M used by Eq.-style point mappings."""
    return ProjectionMatrix(p.m @ m.as_matrix())


def matrices_to_csv(matrices: Sequence[ProjectionMatrix], path) -> None:
    """Dump matrices as CSV, 12 row-major values per line, one view per line."""
    with open(path, "w", encoding="ascii") as fh:
        for p in matrices:
            fh.write(",".join(format(v, ".17g") for v in p.m.ravel()) + "\n")
