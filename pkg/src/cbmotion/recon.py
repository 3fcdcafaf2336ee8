"""Motion-aware filtered backprojection of the central slice.

The FDK-style pipeline: per-pixel cosine pre-weighting, row-wise ramp
filtering along the detector u direction, then backprojection of each slice
pixel through the per-view camera P_i @ M_i with the inverse-square distance
weight.  The reconstruction grid is square, centered on the isocenter, with
image row 0 at +y (so slices display in the usual patient orientation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FileFormatError
from .geometry import ProjectionMatrix, ScanGeometry
from .motion import MotionTrajectory
from .phantom import ProjectionStack

SLICE_MAGIC = b"CBSL"
SLICE_VERSION = 1

KERNEL_KINDS = ("ramp_sharp", "ramp_hann")


@dataclass(frozen=True)
class SliceImage:
    """A reconstructed or rendered square axial slice."""

    pixels: np.ndarray
    fov_mm: float
    z: float = 0.0

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ContractError("slice must be a square 2-D array")
        if not np.all(np.isfinite(p)):
            raise ContractError("slice contains non-finite values")
        object.__setattr__(self, "pixels", p)

    @property
    def grid_size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class FilterKernel:
    """Row filter selection; length is padded to a power of two."""

    kind: str = "ramp_sharp"
    length: int = 512

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        n = self.length
        if n < 2 or n & (n - 1):
            raise ConfigurationError("kernel length must be a power of two")


def default_kernel(geometry: ScanGeometry, kind: str = "ramp_sharp") -> FilterKernel:
    """Kernel with the next power-of-two length >= 2 * detector_cols."""
    n = 1
    while n < 2 * geometry.detector_cols:
        n *= 2
    return FilterKernel(kind, n)


def ramp_taps(length: int, pixel_pitch_u: float) -> np.ndarray:
    """Discrete Ramachandran-Lakshminarayanan taps in wrap-around layout.

    h(0) = 1/4, h(n) = -1/(pi n)^2 for odd n, 0 for even n, scaled by the
    reciprocal detector pitch.  Index k holds the tap for offset k when
    k < length/2 and offset k - length otherwise.
    """
    n = np.arange(length)
    n = np.where(n < length // 2, n, n - length)
    taps = np.zeros(length)
    taps[0] = 0.25
    odd = (n % 2) != 0
    taps[odd] = -1.0 / (np.pi * n[odd]) ** 2
    return taps / pixel_pitch_u


def _transfer_function(kernel: FilterKernel, pixel_pitch_u: float) -> np.ndarray:
    h = np.fft.rfft(ramp_taps(kernel.length, pixel_pitch_u))
    if kernel.kind == "ramp_hann":
        f = np.arange(h.size) / (h.size - 1)
        h = h * (0.5 + 0.5 * np.cos(np.pi * f))
    return h


def cosine_weights(geometry: ScanGeometry) -> np.ndarray:
    """FDK pre-weight cos(gamma) * cos(kappa) per detector pixel."""
    g = geometry
    u = (np.arange(g.detector_cols) - g.detector_center_u) * g.pixel_pitch_u
    v = (np.arange(g.detector_rows) - g.detector_center_v) * g.pixel_pitch_v
    sdd = g.source_detector_distance
    cos_gamma = sdd / np.sqrt(sdd * sdd + u * u)
    cos_kappa = sdd / np.sqrt(sdd * sdd + v * v)
    return cos_kappa[:, None] * cos_gamma[None, :]


def filter_projections(stack: ProjectionStack,
                       kernel: FilterKernel | None = None) -> ProjectionStack:
    """Cosine-weight and ramp-filter every detector row of every view."""
    g = stack.geometry
    kernel = kernel or default_kernel(g)
    if kernel.length < g.detector_cols:
        raise ConfigurationError("kernel length is shorter than a detector row")
    weighted = stack.data * cosine_weights(g)[None, :, :]
    padded = np.zeros((g.n_views, g.detector_rows, kernel.length))
    padded[:, :, :g.detector_cols] = weighted
    spec = np.fft.rfft(padded, axis=2)
    spec *= _transfer_function(kernel, g.pixel_pitch_u)[None, None, :]
    filtered = np.fft.irfft(spec, n=kernel.length, axis=2)[:, :, :g.detector_cols]
    return ProjectionStack(filtered, g)


def slice_grid_coords(grid_size: int, fov_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """World x per image column and world y per image row (row 0 at +y)."""
    step = fov_mm / grid_size
    half = (grid_size - 1) / 2.0
    xs = (np.arange(grid_size) - half) * step
    ys = (half - np.arange(grid_size)) * step
    return xs, ys


def backproject_central_slice(filtered: ProjectionStack,
                              matrices: Sequence[ProjectionMatrix],
                              motion: MotionTrajectory,
                              grid_size: int,
                              fov_mm: float) -> SliceImage:
    """Backproject already-filtered projections through P_i @ M_i.

    Pixels projecting outside the detector contribute zero for that view.
    The accumulation order over views is fixed, so results are bit-stable.
    """
    g = filtered.geometry
    if len(matrices) != g.n_views or len(motion) != g.n_views:
        raise ContractError("stack, matrices and motion lengths are inconsistent")
    xs, ys = slice_grid_coords(grid_size, fov_mm)
    xx = np.broadcast_to(xs[None, :], (grid_size, grid_size)).ravel()
    yy = np.broadcast_to(ys[:, None], (grid_size, grid_size)).ravel()
    hom = np.column_stack([xx, yy, np.zeros(xx.size), np.ones(xx.size)])

    delta_beta = np.radians(g.angular_step_deg)
    # The taps are scaled by the physical detector pitch while the classic
    # weighting assumes the virtual detector at the isocenter; the
    # magnification ratio restores absolute density units.
    scale = 0.5 * delta_beta * (g.source_detector_distance
                                / g.source_axis_distance)
    rows, cols = g.detector_rows, g.detector_cols
    acc = np.zeros(xx.size)
    motion_mats = motion.matrices
    f_flat = np.ascontiguousarray(filtered.data.reshape(g.n_views, -1))
    for i in range(g.n_views):
        q = matrices[i].m @ motion_mats[i]
        h = hom @ q.T
        w = h[:, 2]
        winv = np.reciprocal(np.where(w > 1e-9, w, 1.0))
        u = h[:, 0] * winv
        v = h[:, 1] * winv
        inside = ((w > 1e-9) & (u >= 0.0) & (u <= cols - 1)
                  & (v >= 0.0) & (v <= rows - 1))
        u0 = np.clip(u.astype(np.intp), 0, cols - 2)
        v0 = np.clip(v.astype(np.intp), 0, rows - 2)
        fu = u - u0
        fv = v - v0
        f = f_flat[i]
        idx = v0 * cols + u0
        top = (1.0 - fu) * f.take(idx) + fu * f.take(idx + 1)
        bot = (1.0 - fu) * f.take(idx + cols) + fu * f.take(idx + cols + 1)
        val = (1.0 - fv) * top + fv * bot
        val *= inside
        val *= winv * winv
        acc += val
    return SliceImage((acc * scale).reshape(grid_size, grid_size), fov_mm, 0.0)


def fbp_central_slice(stack: ProjectionStack,
                      matrices: Sequence[ProjectionMatrix],
                      motion: MotionTrajectory,
                      grid_size: int,
                      fov_mm: float,
                      kernel: FilterKernel | None = None) -> SliceImage:
    """Filtered backprojection of the central (z = 0) slice.

    ``motion`` is the per-view patient motion hypothesis; passing the
    trajectory that corrupted the data exactly undoes the corruption.
    """
    filtered = filter_projections(stack, kernel)
    return backproject_central_slice(filtered, matrices, motion,
                                     grid_size, fov_mm)


def normalize_for_display(img: SliceImage | np.ndarray,
                          window_lo: float, window_hi: float) -> np.ndarray:
    """Affine window to 8-bit, clamped; midpoints round half-to-even."""
    if window_hi <= window_lo:
        raise ContractError("window_hi must exceed window_lo")
    p = img.pixels if isinstance(img, SliceImage) else np.asarray(img, float)
    x = np.clip((p - window_lo) / (window_hi - window_lo), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def save_slice(img: SliceImage, path) -> None:
    """Binary slice file: 16-byte header + little-endian float32 pixels."""
    header = struct.pack("<4sIIf", SLICE_MAGIC, SLICE_VERSION,
                         img.grid_size, float(img.fov_mm))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())


def load_slice(path) -> SliceImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FileFormatError("slice file truncated (no header)")
    magic, version, grid, fov = struct.unpack("<4sIIf", raw[:16])
    if magic != SLICE_MAGIC:
        raise FileFormatError("not a slice file (bad magic)")
    if version != SLICE_VERSION:
        raise FileFormatError(f"unsupported slice file version {version}")
    if len(raw) != 16 + 4 * grid * grid:
        raise FileFormatError("slice file truncated (payload size mismatch)")
    pixels = np.frombuffer(raw, dtype="<f4", offset=16).astype(float)
    return SliceImage(pixels.reshape(grid, grid), float(fov))


def save_pgm(gray: np.ndarray, path) -> None:
    """Write an 8-bit grayscale PGM (binary P5)."""
    a = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def save_png(gray: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(path)
