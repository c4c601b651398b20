"""Direct 6DoF calibration recovery by loss minimization, with staged refinement.

The optimizer searches a local chart (rotation vector, translation) for a
corrective transform on top of the miscalibrated extrinsics.  Only the two
geometric losses drive the search; the parameter-distance term needs the
unknown ground truth and is reported for evaluation only.  Refinement chains
stages: each stage starts from the residual left by the previous one and the
final prediction is the composition of the per-stage corrections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize as sciopt
from scipy.spatial import cKDTree

from .camera_projection import back_project, project, rasterize
from .errors import DegenerateSampleError, ValidationError
from .losses import LossBreakdown, LossWeights, total_loss
from .se3 import (
    MiscalibRange,
    RigidTransform,
    compose,
    geodesic_rotation_error,
    invert,
)

_METHODS = ("nelder-mead", "gradient-descent-fd")

# Initial search scale when neither the config nor a stage range provides one.
_DEFAULT_STEP = (0.035, 0.05)
# Degenerate simplexes stall Nelder-Mead; keep every step strictly positive.
_MIN_STEP = 1e-6


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "nelder-mead"
    max_iters: int = 400
    initial_step: tuple | None = None
    convergence_tol: float = 1e-10
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValidationError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.max_iters <= 0:
            raise ValidationError(f"max_iters must be > 0, got {self.max_iters}")
        if self.convergence_tol <= 0 or self.fd_step <= 0:
            raise ValidationError("tolerances must be > 0")
        if self.initial_step is not None:
            rot_step, trans_step = self.initial_step
            if rot_step <= 0 or trans_step <= 0:
                raise ValidationError(f"initial_step must be positive, got {self.initial_step}")


@dataclass(frozen=True)
class RefinementSchedule:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValidationError("schedule needs at least one stage")
        for bounds, cfg in stages:
            if not isinstance(bounds, MiscalibRange) or not isinstance(cfg, OptimizerConfig):
                raise ValidationError("each stage is a (MiscalibRange, OptimizerConfig) pair")
        for (prev, _), (cur, _) in zip(stages, stages[1:]):
            if not (cur.rot_max < prev.rot_max and cur.trans_max < prev.trans_max):
                raise ValidationError(
                    "stage ranges must strictly decrease in both rotation and translation"
                )
        object.__setattr__(self, "stages", stages)


@dataclass
class CalibrationResult:
    predicted: RigidTransform
    per_stage: list
    final_loss: LossBreakdown
    iterations_used: int
    converged: bool

    def to_json_dict(self) -> dict:
        return {
            "predicted": self.predicted.to_json_dict(),
            "per_stage": [t.to_json_dict() for t in self.per_stage],
            "final_loss": self.final_loss.to_json_dict(),
            "iterations_used": self.iterations_used,
            "converged": self.converged,
        }


def eq13_compose(per_stage) -> RigidTransform:
    """Total correction from per-stage corrections via the inverse chain.

    The inverse of the prediction is the left-to-right product of the stage
    inverses, so the prediction itself applies the stages in reverse order.
    """
    inv_chain = RigidTransform.identity()
    for t in per_stage:
        inv_chain = compose(inv_chain, invert(t))
    return invert(inv_chain)


class _GeometricObjective:
    """Geometric loss of a candidate correction, with the truth side fixed.

    The ground-truth projections, depth-map cloud and its lookup tree never
    change during a run, so they are computed once.  A candidate that leaves
    no usable geometry scores infinity rather than failing the search.
    """

    def __init__(self, sample, cloud, w: LossWeights):
        if w.lambda_d <= 0 and w.lambda_p <= 0:
            raise ValidationError(
                "optimization needs lambda_d or lambda_p > 0; the parameter-distance "
                "term has no gradient toward an unknown ground truth"
            )
        self.k = sample.intrinsics
        self.w = w
        self.cloud = cloud
        self.base = compose(sample.miscalibration, sample.base_extrinsics)
        gt_tf = compose(sample.target, self.base)
        pp_gt = project(cloud, self.k, gt_tf)
        if len(pp_gt) == 0:
            raise DegenerateSampleError("no point visible under the true calibration")
        self.gt_index = pp_gt.source_index
        self.gt_uv = np.column_stack([pp_gt.u, pp_gt.v])
        self.s_gt = back_project(rasterize(pp_gt, self.k), self.k).points
        self.gt_tree = cKDTree(self.s_gt)
        self.stage_base = self.base

    def recenter(self, correction: RigidTransform):
        self.stage_base = compose(correction, self.stage_base)

    def value(self, x) -> float:
        delta = RigidTransform.from_rotvec(x[:3], x[3:])
        tf = compose(delta, self.stage_base)
        pp = project(self.cloud, self.k, tf)
        if len(pp) == 0:
            return float("inf")
        loss = 0.0
        if self.w.lambda_d > 0:
            common, ia, ib = np.intersect1d(
                pp.source_index, self.gt_index, assume_unique=True, return_indices=True
            )
            if common.size == 0:
                return float("inf")
            diff = np.column_stack([pp.u[ia], pp.v[ia]]) - self.gt_uv[ib]
            loss += self.w.lambda_d * float(np.mean(np.sum(diff * diff, axis=1)))
        if self.w.lambda_p > 0:
            s_pred = back_project(rasterize(pp, self.k), self.k).points
            if s_pred.shape[0] == 0:
                return float("inf")
            d_fwd, _ = self.gt_tree.query(s_pred)
            d_bwd, _ = cKDTree(s_pred).query(self.s_gt)
            loss += self.w.lambda_p * float(np.mean(d_fwd**2) + np.mean(d_bwd**2))
        return loss


def _steps(cfg: OptimizerConfig, bounds: MiscalibRange | None) -> np.ndarray:
    if cfg.initial_step is not None:
        rot_step, trans_step = cfg.initial_step
    elif bounds is not None:
        rot_step, trans_step = 0.2 * bounds.rot_max, 0.2 * bounds.trans_max
    else:
        rot_step, trans_step = _DEFAULT_STEP
    rot_step = max(rot_step, _MIN_STEP)
    trans_step = max(trans_step, _MIN_STEP)
    return np.array([rot_step] * 3 + [trans_step] * 3)


class _BestTracker:
    def __init__(self, fn):
        self.fn = fn
        self.best_x = None
        self.best_val = np.inf

    def __call__(self, x):
        val = self.fn(x)
        if val < self.best_val:
            self.best_val = val
            self.best_x = np.array(x, dtype=float)
        return val


def _minimize_stage(obj: _GeometricObjective, cfg: OptimizerConfig, steps: np.ndarray):
    """One stage from the zero correction; returns (best_x, iterations, converged)."""
    x0 = np.zeros(6)
    start = obj.value(x0)  # propagate degeneracy before the wrapped search
    tracker = _BestTracker(obj.value)
    tracker.best_val, tracker.best_x = start, x0.copy()
    if cfg.method == "nelder-mead":
        simplex = np.vstack([x0] + [x0 + steps[i] * np.eye(6)[i] for i in range(6)])
        res = sciopt.minimize(
            tracker,
            x0,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "maxiter": cfg.max_iters,
                "maxfev": 20 * cfg.max_iters,
                "xatol": 1e-9,
                "fatol": cfg.convergence_tol,
            },
        )
        return tracker.best_x, int(res.nit), bool(res.success)
    return _gradient_descent_fd(tracker, x0, cfg, steps)


def _gradient_descent_fd(tracker, x0, cfg: OptimizerConfig, steps):
    """Finite-difference steepest descent with backtracking line search."""
    x = x0.copy()
    fx = tracker(x)
    h = cfg.fd_step
    for it in range(cfg.max_iters):
        grad = np.zeros(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            grad[i] = (tracker(x + e) - tracker(x - e)) / (2.0 * h)
        gnorm = float(np.linalg.norm(grad))
        if not np.isfinite(gnorm) or gnorm == 0.0:
            return tracker.best_x, it + 1, True
        alpha = float(np.max(steps)) / gnorm
        fnew = fx
        improved = False
        for _ in range(30):
            fnew = tracker(x - alpha * grad)
            if fnew < fx - 1e-4 * alpha * gnorm * gnorm:
                x = x - alpha * grad
                improved = True
                break
            alpha *= 0.5
        if not improved:
            return tracker.best_x, it + 1, True
        decrease = fx - fnew
        fx = fnew
        if decrease <= cfg.convergence_tol:
            return tracker.best_x, it + 1, True
    return tracker.best_x, cfg.max_iters, False


def _load_cloud(sample):
    from .dataset import load_kitti_velodyne

    return load_kitti_velodyne(sample.cloud_path)


def _finish(sample, w, per_stage, iterations, converged, cloud) -> CalibrationResult:
    predicted = eq13_compose(per_stage)
    final = total_loss(
        sample, (predicted.rotvec(), predicted.translation), w, cloud=cloud
    )
    return CalibrationResult(
        predicted=predicted,
        per_stage=list(per_stage),
        final_loss=final,
        iterations_used=iterations,
        converged=converged,
    )


def optimize_single(sample, w: LossWeights, cfg: OptimizerConfig, cloud=None) -> CalibrationResult:
    """Recover the corrective transform with one optimization stage."""
    if cloud is None:
        cloud = _load_cloud(sample)
    obj = _GeometricObjective(sample, cloud, w)
    best_x, iters, converged = _minimize_stage(obj, cfg, _steps(cfg, None))
    stage_tf = RigidTransform.from_rotvec(best_x[:3], best_x[3:])
    return _finish(sample, w, [stage_tf], iters, converged, cloud)


def optimize_refined(
    sample, w: LossWeights, sched: RefinementSchedule, cloud=None
) -> CalibrationResult:
    """Chain stages from coarse to fine; each solves the previous residual."""
    if cloud is None:
        cloud = _load_cloud(sample)
    obj = _GeometricObjective(sample, cloud, w)
    per_stage = []
    total_iters = 0
    all_converged = True
    for bounds, cfg in sched.stages:
        best_x, iters, converged = _minimize_stage(obj, cfg, _steps(cfg, bounds))
        stage_tf = RigidTransform.from_rotvec(best_x[:3], best_x[3:])
        per_stage.append(stage_tf)
        total_iters += iters
        all_converged = all_converged and converged
        obj.recenter(stage_tf)
    return _finish(sample, w, per_stage, total_iters, all_converged, cloud)


def evaluate_against_truth(result: CalibrationResult, sample):
    """Rotation geodesic error (radians) and per-axis absolute translation error."""
    rot_err = geodesic_rotation_error(result.predicted.rotation, sample.target.rotation)
    trans_err = np.abs(result.predicted.translation - sample.target.translation)
    return rot_err, trans_err
