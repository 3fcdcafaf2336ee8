"""Autofocus motion estimation: Nelder-Mead over compensation-spline angles.

The decision vector holds one z-rotation angle (degrees) per compensation
node; the objective reconstructs the central slice under the hypothesized
motion and scores it with the selected image-quality metric.  The optimizer
never sees the ground-truth trajectory unless the oracle metric is selected;
ground truth attached to a problem is used purely to annotate the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ContractError, OptimizationError
from .iqm import IqmKind, OracleRpeIqm, evaluate_iqm
from .motion import (MotionTrajectory, RpeConfig, SplineMotionModel,
                     equally_spaced_nodes, residual_rpe_for_angles,
                     sample_sphere_points, spline_angles, spline_to_trajectory)
from .phantom import ProjectionStack
from .recon import (FilterKernel, SliceImage, backproject_central_slice,
                    filter_projections)

CACHE_QUANTUM_DEG = 1e-6


@dataclass(frozen=True)
class SimplexConfig:
    """Nelder-Mead coefficients, initial step and stopping rules."""

    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    initial_step: float = 0.5
    max_evaluations: int = 2000
    x_tolerance: float = 1e-3
    f_tolerance: float = 1e-6
    restarts: int = 1

    def __post_init__(self) -> None:
        if self.reflection <= 0 or self.expansion <= 1 \
                or not 0 < self.contraction < 1 or not 0 < self.shrink < 1:
            raise ConfigurationError("simplex coefficients out of range")
        if self.x_tolerance <= 0 or self.f_tolerance <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.initial_step == 0:
            raise ConfigurationError("initial_step must be nonzero")
        if self.max_evaluations < 1 or self.restarts < 0:
            raise ConfigurationError("invalid evaluation budget")


@dataclass
class TraceRecord:
    index: int
    x: np.ndarray
    f: float
    true_rpe: Optional[float] = None


@dataclass
class IterationTrace:
    """Every objective value the optimizer consumed, in evaluation order."""

    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def objective_values(self) -> np.ndarray:
        return np.array([r.f for r in self.records])

    def true_rpe_values(self) -> np.ndarray:
        return np.array([np.nan if r.true_rpe is None else r.true_rpe
                         for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            n = self.records[0].x.size if self.records else 0
            cols = ",".join(f"node_{i}" for i in range(n))
            fh.write(f"evaluation,f,true_rpe,{cols}\n")
            for r in self.records:
                rpe = "" if r.true_rpe is None else format(r.true_rpe, ".17g")
                fh.write(f"{r.index},{format(r.f, '.17g')},{rpe},"
                         + ",".join(format(v, ".17g") for v in r.x) + "\n")


@dataclass
class NelderMeadResult:
    x_best: np.ndarray
    f_best: float
    trace: IterationTrace
    evaluations: int
    restarts_used: int


class _BudgetExhausted(Exception):
    pass


def nelder_mead(objective: Callable[[np.ndarray], float],
                x0,
                config: SimplexConfig | None = None) -> NelderMeadResult:
    """Minimize with the classic reflect/expand/contract/shrink simplex.

    The initial simplex is ``x0`` plus ``initial_step`` along each
    coordinate.  Terminates when the simplex diameter drops below
    ``x_tolerance``, the objective spread drops below ``f_tolerance``, or
    the evaluation budget is spent; remaining restarts re-seed the simplex
    at the incumbent.  Equal objective values are ordered by vertex index,
    so the iteration is fully deterministic.
    """
    config = config or SimplexConfig()
    x0 = np.asarray(x0, dtype=float).copy()
    n = x0.size
    if n < 1:
        raise ContractError("x0 must have at least one coordinate")
    trace = IterationTrace()
    state = {"x": x0.copy(), "f": np.inf}

    def f(x: np.ndarray) -> float:
        if len(trace) >= config.max_evaluations:
            raise _BudgetExhausted
        val = float(objective(x))
        if not np.isfinite(val):
            raise OptimizationError(
                f"objective is not finite at {np.array2string(x, precision=6)}")
        trace.records.append(TraceRecord(len(trace), x.copy(), val))
        if val < state["f"]:
            state["x"], state["f"] = x.copy(), val
        return val

    def build_simplex(center: np.ndarray):
        verts = [center.copy()]
        for k in range(n):
            v = center.copy()
            v[k] += config.initial_step
            verts.append(v)
        return np.array(verts), np.array([f(v) for v in verts])

    restarts_used = 0
    try:
        verts, fs = build_simplex(x0)
        while True:
            order = np.argsort(fs, kind="stable")
            verts, fs = verts[order], fs[order]
            diameter = np.abs(verts[1:] - verts[0]).max()
            spread = fs[-1] - fs[0]
            if diameter < config.x_tolerance or spread < config.f_tolerance:
                if restarts_used < config.restarts:
                    restarts_used += 1
                    verts, fs = build_simplex(state["x"])
                    continue
                break
            centroid = verts[:-1].mean(axis=0)
            away = centroid - verts[-1]
            xr = centroid + config.reflection * away
            fr = f(xr)
            if fr < fs[0]:
                xe = centroid + config.expansion * config.reflection * away
                fe = f(xe)
                if fe < fr:
                    verts[-1], fs[-1] = xe, fe
                else:
                    verts[-1], fs[-1] = xr, fr
            elif fr < fs[-2]:
                verts[-1], fs[-1] = xr, fr
            else:
                if fr < fs[-1]:
                    xc = centroid + config.contraction * (xr - centroid)
                    fc = f(xc)
                    accept = fc <= fr
                else:
                    xc = centroid - config.contraction * away
                    fc = f(xc)
                    accept = fc < fs[-1]
                if accept:
                    verts[-1], fs[-1] = xc, fc
                else:
                    for k in range(1, n + 1):
                        verts[k] = verts[0] + config.shrink * (verts[k] - verts[0])
                        fs[k] = f(verts[k])
    except _BudgetExhausted:
        pass
    return NelderMeadResult(state["x"], state["f"], trace,
                            len(trace), restarts_used)


# ---------------------------------------------------------------------------
# Compensation problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompensationProblem:
    """A corrupted stack plus the knobs of the autofocus objective.

    ``ground_truth`` never influences the optimization unless the metric is
    the oracle; it only enables true-RPE annotation of the trace.
    """

    stack: ProjectionStack
    matrices: tuple
    n_comp_nodes: int
    iqm: IqmKind
    grid_size: int = 128
    fov_mm: float = 200.0
    kernel: Optional[FilterKernel] = None
    ground_truth: Optional[MotionTrajectory] = None
    rpe_config: RpeConfig = RpeConfig()

    def __post_init__(self) -> None:
        if self.n_comp_nodes < 2:
            raise ConfigurationError("n_comp_nodes must be at least 2")
        object.__setattr__(self, "matrices", tuple(self.matrices))


@dataclass
class CompensationResult:
    model: SplineMotionModel
    image: SliceImage
    trace: IterationTrace


def compensate(problem: CompensationProblem,
               config: SimplexConfig | None = None) -> CompensationResult:
    """Estimate the motion trajectory by minimizing the selected IQM.

    Starts from the zero-motion hypothesis.  Returns the best spline
    model, its reconstruction, and the full evaluation trace (annotated
    with true residual RPE when ground truth is attached).
    """
    config = config or SimplexConfig()
    geometry = problem.stack.geometry
    n_views = geometry.n_views
    if len(problem.matrices) != n_views:
        raise ContractError("matrix count does not match the stack")
    positions = equally_spaced_nodes(problem.n_comp_nodes, n_views)
    window = (0, n_views)
    filtered = filter_projections(problem.stack, problem.kernel)
    image_based = not isinstance(problem.iqm, OracleRpeIqm)
    cache: dict[tuple, float] = {}

    def model_of(v: np.ndarray) -> SplineMotionModel:
        return SplineMotionModel(positions, np.asarray(v, float), window)

    def objective(v: np.ndarray) -> float:
        key = tuple(np.round(np.asarray(v) / CACHE_QUANTUM_DEG).astype(np.int64))
        hit = cache.get(key)
        if hit is not None:
            return hit
        traj = spline_to_trajectory(model_of(v), n_views)
        if image_based:
            img = backproject_central_slice(filtered, problem.matrices, traj,
                                            problem.grid_size, problem.fov_mm)
            val = evaluate_iqm(problem.iqm, img)
        else:
            val = evaluate_iqm(problem.iqm, None, candidate_trajectory=traj)
        cache[key] = val
        return val

    result = nelder_mead(objective, np.zeros(problem.n_comp_nodes), config)
    best_model = model_of(result.x_best)
    best_traj = spline_to_trajectory(best_model, n_views)
    image = backproject_central_slice(filtered, problem.matrices, best_traj,
                                      problem.grid_size, problem.fov_mm)
    if problem.ground_truth is not None:
        _annotate_true_rpe(result.trace, problem, positions, window)
    return CompensationResult(best_model, image, result.trace)


def _annotate_true_rpe(trace: IterationTrace, problem: CompensationProblem,
                       positions: np.ndarray, window: tuple[int, int]) -> None:
    geometry = problem.stack.geometry
    n_views = geometry.n_views
    true_angles = problem.ground_truth.angles_deg()
    points = sample_sphere_points(problem.rpe_config)
    rows = np.stack([
        spline_angles(SplineMotionModel(positions, r.x, window), n_views)
        for r in trace.records])
    values = residual_rpe_for_angles(
        true_angles, rows, problem.matrices, points,
        geometry.pixel_pitch_u, geometry.pixel_pitch_v)
    for rec, val in zip(trace.records, values):
        rec.true_rpe = float(val)
