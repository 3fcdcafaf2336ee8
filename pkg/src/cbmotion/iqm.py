"""Image-quality metrics consumed by the autofocus objective.

All metrics are minimized: lower is better.  The oracle metric scores a
candidate motion hypothesis against a known ground-truth trajectory and is
only meaningful in simulation benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ResourceError
from .geometry import ProjectionMatrix
from .motion import (MotionTrajectory, RpeConfig, residual_reprojection_error,
                     sample_sphere_points)
from .recon import SliceImage


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, SliceImage) else np.asarray(img, float)


def entropy_iqm(img, n_bins: int = 256) -> float:
    """Shannon entropy (nats) of the image histogram over its own range."""
    if n_bins < 2:
        raise ContractError("n_bins must be at least 2")
    v = _pixels(img).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(v, bins=n_bins, range=(lo, hi))
    p = counts[counts > 0] / v.size
    return float(-(p * np.log(p)).sum())


def total_variation(img) -> float:
    """Isotropic total variation with forward differences."""
    p = _pixels(img)
    if p.shape[0] < 2 or p.shape[1] < 2:
        raise ContractError("image must be at least 2x2")
    dx = np.zeros_like(p)
    dy = np.zeros_like(p)
    dx[:, :-1] = p[:, 1:] - p[:, :-1]
    dy[:-1, :] = p[1:, :] - p[:-1, :]
    return float(np.sqrt(dx * dx + dy * dy).sum())


@dataclass(frozen=True)
class EntropyIqm:
    n_bins: int = 256


@dataclass(frozen=True)
class TotalVariationIqm:
    pass


@dataclass(frozen=True)
class LearnedIqm:
    """Predicted reprojection error from a trained regression model."""

    model: object


@dataclass(frozen=True)
class OracleRpeIqm:
    """Ground-truth residual reprojection error of the candidate trajectory."""

    ground_truth: MotionTrajectory
    matrices: tuple
    rpe_config: RpeConfig = RpeConfig()
    pixel_pitch_u: float = 1.0
    pixel_pitch_v: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrices", tuple(self.matrices))


IqmKind = Union[EntropyIqm, TotalVariationIqm, LearnedIqm, OracleRpeIqm]


def evaluate_iqm(kind: IqmKind, img: Optional[SliceImage],
                 candidate_trajectory: MotionTrajectory | None = None) -> float:
    """Dispatch to the selected metric; lower is always better.

    ``candidate_trajectory`` is required (and ``img`` ignored) for the
    oracle metric; image-based metrics require ``img``.
    """
    if isinstance(kind, OracleRpeIqm):
        if candidate_trajectory is None:
            raise ContractError("oracle metric needs a candidate trajectory")
        points = sample_sphere_points(kind.rpe_config)
        return residual_reprojection_error(
            kind.ground_truth, candidate_trajectory, kind.matrices, points,
            kind.pixel_pitch_u, kind.pixel_pitch_v)
    if img is None:
        raise ContractError("image-based metrics need a reconstruction")
    if isinstance(kind, EntropyIqm):
        return entropy_iqm(img, kind.n_bins)
    if isinstance(kind, TotalVariationIqm):
        return total_variation(img)
    if isinstance(kind, LearnedIqm):
        if kind.model is None:
            raise ResourceError("learned metric selected but no model loaded")
        from .regressor import forward
        return forward(kind.model, img)
    raise ContractError(f"unknown IQM kind {kind!r}")
