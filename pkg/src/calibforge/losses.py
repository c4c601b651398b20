"""Supervision losses: parameter distance, reprojection error, Chamfer distance.

All three compare a predicted correction against the ground-truth correction
on top of the same miscalibrated extrinsics.  Each is exactly zero when the
prediction equals the truth, and the weighted total combines them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera_projection import back_project, project, rasterize
from .errors import DegenerateSampleError, ValidationError
from .se3 import RigidTransform, compose


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss terms plus the rotation scaling inside the first."""

    lambda_t: float = 4.0
    lambda_d: float = 1.0
    lambda_p: float = 40.0
    alpha: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_t, self.lambda_d, self.lambda_p, self.alpha)
        if any(v < 0 for v in vals):
            raise ValidationError(f"loss weights must be >= 0, got {vals}")


@dataclass(frozen=True)
class LossBreakdown:
    transformation: float
    depth_map: float
    point_cloud: float
    total: float

    def to_json_dict(self) -> dict:
        return {
            "transformation": self.transformation,
            "depth_map": self.depth_map,
            "point_cloud": self.point_cloud,
            "total": self.total,
        }


def transformation_loss(r_pred, r_gt, t_pred, t_gt, alpha: float = 1.0) -> float:
    """alpha * ||r_pred - r_gt|| + ||t_pred - t_gt|| (plain norms, not squared)."""
    r_pred = np.asarray(r_pred, dtype=float)
    r_gt = np.asarray(r_gt, dtype=float)
    t_pred = np.asarray(t_pred, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    return float(alpha * np.linalg.norm(r_pred - r_gt) + np.linalg.norm(t_pred - t_gt))


def depth_map_loss(pc, k, base, t_pred: RigidTransform, t_gt: RigidTransform) -> float:
    """Mean squared pixel distance between the two projections of shared points.

    Both corrections apply on top of the same miscalibrated extrinsics, so a
    source point visible in both configurations yields one correspondence;
    points visible in only one are excluded.
    """
    pp_pred = project(pc, k, compose(t_pred, base))
    pp_gt = project(pc, k, compose(t_gt, base))
    _, ia, ib = np.intersect1d(
        pp_pred.source_index, pp_gt.source_index, assume_unique=True, return_indices=True
    )
    if ia.size == 0:
        raise DegenerateSampleError(
            "no point projects in front of the camera in both configurations"
        )
    du = pp_pred.u[ia] - pp_gt.u[ib]
    dv = pp_pred.v[ia] - pp_gt.v[ib]
    return float(np.mean(du * du + dv * dv))


def chamfer_loss(s_pred, s_gt) -> float:
    """Sum of the two directed mean squared nearest-neighbor distances."""
    if len(s_pred) == 0 or len(s_gt) == 0:
        raise DegenerateSampleError("Chamfer distance needs two nonempty clouds")
    d_fwd, _ = cKDTree(s_gt.points).query(s_pred.points)
    d_bwd, _ = cKDTree(s_pred.points).query(s_gt.points)
    return float(np.mean(d_fwd**2) + np.mean(d_bwd**2))


def _depth_map_cloud(pc, k, transform):
    return back_project(rasterize(project(pc, k, transform), k), k)


def total_loss(sample, prediction, w: LossWeights, cloud=None) -> LossBreakdown:
    """Weighted sum of the three losses for a prediction on one sample.

    prediction is a (rotvec, translation) pair for the corrective transform.
    The Chamfer term compares the back-projections of the predicted and
    ground-truth depth maps, so it sees exactly what survives rasterization.
    """
    if cloud is None:
        from .dataset import load_kitti_velodyne

        cloud = load_kitti_velodyne(sample.cloud_path)
    r_pred, t_pred = prediction
    pred_tf = RigidTransform.from_rotvec(r_pred, t_pred)
    gt_tf = sample.target
    base = compose(sample.miscalibration, sample.base_extrinsics)

    lt = transformation_loss(
        r_pred, gt_tf.rotvec(), t_pred, gt_tf.translation, alpha=w.alpha
    )
    ld = depth_map_loss(cloud, sample.intrinsics, base, pred_tf, gt_tf)
    lp = chamfer_loss(
        _depth_map_cloud(cloud, sample.intrinsics, compose(pred_tf, base)),
        _depth_map_cloud(cloud, sample.intrinsics, compose(gt_tf, base)),
    )
    total = w.lambda_t * lt + w.lambda_d * ld + w.lambda_p * lp
    return LossBreakdown(transformation=lt, depth_map=ld, point_cloud=lp, total=total)


def loss_gradient_fd(sample, at, w: LossWeights, h: float = 1e-5, cloud=None) -> np.ndarray:
    """Central finite differences of the total loss over (rotvec, translation)."""
    if h <= 0:
        raise ValidationError(f"fd step must be > 0, got {h}")
    if cloud is None:
        from .dataset import load_kitti_velodyne

        cloud = load_kitti_velodyne(sample.cloud_path)
    x0 = np.concatenate([np.asarray(at[0], dtype=float), np.asarray(at[1], dtype=float)])
    grad = np.zeros(6)
    for i in range(6):
        plus = x0.copy()
        minus = x0.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = total_loss(sample, (plus[:3], plus[3:]), w, cloud=cloud).total
        f_minus = total_loss(sample, (minus[:3], minus[3:]), w, cloud=cloud).total
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
