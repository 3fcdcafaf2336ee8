"""SSIM scoring and the two motion-compensation benchmark scenarios.

A benchmark corrupts a phantom acquisition with a seeded random motion,
reconstructs the motion-affected baseline, then runs one autofocus
compensation per metric arm on the identical corrupted stack and scores
every reconstruction against the rendered ground-truth slice.  Scores are
computed on display-windowed images, matching how such comparisons are
presented (a [500, 2000] HU-style window).
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.signal import convolve2d

from .autofocus import (CompensationProblem, SimplexConfig, compensate)
from .errors import ConfigurationError, ContractError
from .geometry import ScanGeometry, make_circular_trajectory
from .iqm import (EntropyIqm, IqmKind, LearnedIqm, OracleRpeIqm,
                  TotalVariationIqm)
from .motion import (MotionTrajectory, RpeConfig, identity_trajectory,
                     random_motion, reprojection_error, sample_sphere_points,
                     spline_to_trajectory)
from .phantom import Phantom, forward_project, render_slice
from .recon import FilterKernel, SliceImage, fbp_central_slice, save_png, \
    normalize_for_display

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Structural similarity between two equally sized images.

    11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2 with
    L the joint dynamic range of both images, averaged over valid window
    positions.
    """
    pa = a.pixels if isinstance(a, SliceImage) else np.asarray(a, float)
    pb = b.pixels if isinstance(b, SliceImage) else np.asarray(b, float)
    if pa.shape != pb.shape:
        raise ContractError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    if min(pa.shape) < SSIM_WINDOW:
        raise ContractError(f"images must be at least {SSIM_WINDOW} pixels wide")
    lo = min(pa.min(), pb.min())
    hi = max(pa.max(), pb.max())
    span = float(hi - lo)
    if span == 0.0:
        return 1.0
    c1 = (0.01 * span) ** 2
    c2 = (0.03 * span) ** 2
    w = _gaussian_window()
    mu_a = convolve2d(pa, w, mode="valid")
    mu_b = convolve2d(pb, w, mode="valid")
    var_a = convolve2d(pa * pa, w, mode="valid") - mu_a * mu_a
    var_b = convolve2d(pb * pb, w, mode="valid") - mu_b * mu_b
    cov = convolve2d(pa * pb, w, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def windowed(img, window: tuple[float, float]) -> np.ndarray:
    """Clamp to the display window and rescale to [0, 1]."""
    p = img.pixels if isinstance(img, SliceImage) else np.asarray(img, float)
    lo, hi = window
    if hi <= lo:
        raise ContractError("display window must be increasing")
    return np.clip((p - lo) / (hi - lo), 0.0, 1.0)


def windowed_ssim(a, b, window: tuple[float, float]) -> float:
    return ssim(windowed(a, window), windowed(b, window))


# ---------------------------------------------------------------------------
# Benchmark scenarios
# ---------------------------------------------------------------------------

ARM_NAMES = ("entropy", "total_variation", "learned", "oracle_rpe")


@dataclass(frozen=True)
class BenchmarkScenario:
    """Generation/compensation node counts and the metric arms to compare."""

    name: str
    gen_nodes: int
    comp_nodes: int
    target_rpe: float
    seeds: tuple[int, ...]
    iqm_arms: tuple[str, ...]
    active_fraction: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        if self.name not in ("inverse_crime", "clinical_setting"):
            raise ConfigurationError(f"unknown scenario {self.name!r}")
        if self.name == "inverse_crime" and self.gen_nodes != self.comp_nodes:
            raise ConfigurationError(
                "inverse_crime requires gen_nodes == comp_nodes")
        for arm in self.iqm_arms:
            if arm not in ARM_NAMES:
                raise ConfigurationError(f"unknown IQM arm {arm!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "iqm_arms", tuple(self.iqm_arms))


def inverse_crime_scenario(nodes: int = 15, target_rpe: float = 0.3,
                           seeds: Sequence[int] = (1,),
                           arms: Sequence[str] = ("oracle_rpe",)) -> BenchmarkScenario:
    return BenchmarkScenario("inverse_crime", nodes, nodes, target_rpe,
                             tuple(seeds), tuple(arms))


def clinical_setting_scenario(gen_nodes: int = 10, comp_nodes: int = 20,
                              target_rpe: float = 0.3,
                              seeds: Sequence[int] = (1, 2, 3, 4, 5),
                              arms: Sequence[str] = ("entropy", "learned"),
                              ) -> BenchmarkScenario:
    return BenchmarkScenario("clinical_setting", gen_nodes, comp_nodes,
                             target_rpe, tuple(seeds), tuple(arms))


@dataclass
class ArmResult:
    seed: int
    arm: str
    ssim_final: float
    rpe_initial: float
    rpe_final: float
    evaluations: int
    wall_time_s: float
    error: str = ""
    trace: object = None
    image: Optional[SliceImage] = None


@dataclass
class SeedResult:
    seed: int
    stack_sha256: str
    ssim_motion_free: float
    ssim_motion_affected: float
    rpe_true: float
    arms: list


@dataclass
class BenchmarkReport:
    scenario: BenchmarkScenario
    display_window: tuple[float, float]
    seeds: list

    def rows(self):
        for sr in self.seeds:
            for ar in sr.arms:
                yield sr, ar

    def to_csv(self, path) -> None:
        """Deterministic report rows; timing lives in the summary only."""
        with open(path, "w", encoding="ascii") as fh:
            fh.write("seed,arm,ssim_final,ssim_motion_free,ssim_motion_affected,"
                     "rpe_initial,rpe_final,evaluations,stack_sha256,error\n")
            for sr, ar in self.rows():
                fh.write(",".join([
                    str(sr.seed), ar.arm,
                    format(ar.ssim_final, ".9g"),
                    format(sr.ssim_motion_free, ".9g"),
                    format(sr.ssim_motion_affected, ".9g"),
                    format(ar.rpe_initial, ".9g"),
                    format(ar.rpe_final, ".9g"),
                    str(ar.evaluations), sr.stack_sha256, ar.error,
                ]) + "\n")

    def median_ssim(self, arm: str) -> float:
        vals = [ar.ssim_final for sr, ar in self.rows()
                if ar.arm == arm and not ar.error]
        return float(np.median(vals)) if vals else math.nan

    def summary(self) -> str:
        lines = [f"scenario: {self.scenario.name} "
                 f"(gen {self.scenario.gen_nodes} / comp {self.scenario.comp_nodes} "
                 f"nodes, target RPE {self.scenario.target_rpe} mm, "
                 f"{len(self.scenario.seeds)} seeds)"]
        for sr in self.seeds:
            lines.append(f"  seed {sr.seed}: motion-free SSIM "
                         f"{sr.ssim_motion_free:.3f}, motion-affected "
                         f"{sr.ssim_motion_affected:.3f}, true RPE {sr.rpe_true:.4f}")
            for ar in sr.arms:
                if ar.error:
                    lines.append(f"    {ar.arm:>16}: FAILED ({ar.error})")
                else:
                    lines.append(
                        f"    {ar.arm:>16}: SSIM {ar.ssim_final:.3f}, RPE "
                        f"{ar.rpe_initial:.4f} -> {ar.rpe_final:.4f} "
                        f"({ar.evaluations} evals, {ar.wall_time_s:.1f} s)")
        for arm in self.scenario.iqm_arms:
            lines.append(f"  median final SSIM [{arm}]: {self.median_ssim(arm):.4f}")
        return "\n".join(lines)


def _make_arm_kind(arm: str, model, gt_traj, matrices, rpe_config,
                   geometry) -> IqmKind:
    if arm == "entropy":
        return EntropyIqm()
    if arm == "total_variation":
        return TotalVariationIqm()
    if arm == "learned":
        return LearnedIqm(model)
    if arm == "oracle_rpe":
        return OracleRpeIqm(gt_traj, tuple(matrices), rpe_config,
                            geometry.pixel_pitch_u, geometry.pixel_pitch_v)
    raise ConfigurationError(f"unknown IQM arm {arm!r}")


def run_benchmark(scenario: BenchmarkScenario,
                  phantom: Phantom,
                  geometry: ScanGeometry,
                  model=None,
                  grid_size: int = 128,
                  fov_mm: float = 200.0,
                  kernel: FilterKernel | None = None,
                  rpe_config: RpeConfig | None = None,
                  simplex_config: SimplexConfig | None = None,
                  display_window: tuple[float, float] = (0.5, 2.0),
                  out_dir=None) -> BenchmarkReport:
    """Run every (seed, arm) cell of a scenario on shared corrupted stacks."""
    if "learned" in scenario.iqm_arms and model is None:
        raise ConfigurationError("scenario has a learned arm but no model given")
    rpe_config = rpe_config or RpeConfig()
    simplex_config = simplex_config or SimplexConfig()
    matrices = make_circular_trajectory(geometry)
    points = sample_sphere_points(rpe_config)
    pitches = (geometry.pixel_pitch_u, geometry.pixel_pitch_v)
    gt_slice = render_slice(phantom, grid_size, fov_mm)
    clean = forward_project(phantom, matrices, geometry)
    ident = identity_trajectory(geometry.n_views)
    mf_recon = fbp_central_slice(clean, matrices, ident, grid_size, fov_mm, kernel)
    ssim_mf = windowed_ssim(mf_recon, gt_slice, display_window)

    seed_results = []
    for seed in scenario.seeds:
        gen_model = random_motion(geometry.n_views, scenario.gen_nodes,
                                  scenario.target_rpe, scenario.active_fraction,
                                  seed, geometry, rpe_config, matrices)
        gt_traj = spline_to_trajectory(gen_model, geometry.n_views)
        rpe_true = reprojection_error(gt_traj, matrices, points, *pitches)
        corrupted = forward_project(phantom, matrices, geometry, motion=gt_traj)
        sha = hashlib.sha256(
            np.ascontiguousarray(corrupted.data, dtype="<f8").tobytes()).hexdigest()
        mo_recon = fbp_central_slice(corrupted, matrices, ident,
                                     grid_size, fov_mm, kernel)
        ssim_mo = windowed_ssim(mo_recon, gt_slice, display_window)

        arm_results = []
        for arm in scenario.iqm_arms:
            t0 = time.perf_counter()
            try:
                kind = _make_arm_kind(arm, model, gt_traj, matrices,
                                      rpe_config, geometry)
                problem = CompensationProblem(
                    stack=corrupted, matrices=tuple(matrices),
                    n_comp_nodes=scenario.comp_nodes, iqm=kind,
                    grid_size=grid_size, fov_mm=fov_mm, kernel=kernel,
                    ground_truth=gt_traj, rpe_config=rpe_config)
                result = compensate(problem, simplex_config)
                final_traj = spline_to_trajectory(result.model, geometry.n_views)
                from .motion import residual_reprojection_error
                rpe_final = residual_reprojection_error(
                    gt_traj, final_traj, matrices, points, *pitches)
                arm_results.append(ArmResult(
                    seed=seed, arm=arm,
                    ssim_final=windowed_ssim(result.image, gt_slice, display_window),
                    rpe_initial=rpe_true, rpe_final=rpe_final,
                    evaluations=len(result.trace),
                    wall_time_s=time.perf_counter() - t0,
                    trace=result.trace, image=result.image))
            except Exception as exc:  # record the cell, keep the grid running
                arm_results.append(ArmResult(
                    seed=seed, arm=arm, ssim_final=math.nan,
                    rpe_initial=rpe_true, rpe_final=math.nan, evaluations=0,
                    wall_time_s=time.perf_counter() - t0, error=str(exc)))
        seed_results.append(SeedResult(seed, sha, ssim_mf, ssim_mo,
                                       rpe_true, arm_results))
        if out_dir is not None:
            _write_panels(out_dir, seed, display_window, gt_slice, mo_recon,
                          scenario.iqm_arms, arm_results)
    report = BenchmarkReport(scenario, display_window, seed_results)
    if out_dir is not None:
        import os
        report.to_csv(os.path.join(out_dir, "report.csv"))
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(report.summary() + "\n")
    return report


def _write_panels(out_dir, seed, window, gt_slice, mo_recon, arms, arm_results):
    """Fig.-style panel strip: ground truth, motion affected, one per arm."""
    import os
    panels = [normalize_for_display(gt_slice, *window),
              normalize_for_display(mo_recon, *window)]
    for ar in arm_results:
        if ar.image is not None:
            panels.append(normalize_for_display(ar.image, *window))
    gap = np.full((panels[0].shape[0], 2), 255, dtype=np.uint8)
    strip = panels[0]
    for p in panels[1:]:
        strip = np.concatenate([strip, gap, p], axis=1)
    save_png(strip, os.path.join(out_dir, f"panel_seed{seed}.png"))
