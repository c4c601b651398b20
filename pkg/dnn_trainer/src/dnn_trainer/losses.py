"""Differentiable replica of the calibration pipeline's training objective.

The three terms mirror the evaluator's definitions bit-for-bit at the level
of semantics: plain-norm parameter distance, mean squared reprojection
distance over points visible in both configurations, and a symmetric Chamfer
distance between the back-projections of the rasterized depth maps.  Pixel
assignment (rounding, z-buffer, visibility) is resolved on detached values;
gradients flow through the continuous coordinates and depths.
"""

import numpy as np
import torch

Z_MIN = 0.1


class DegenerateSampleError(RuntimeError):
    """No usable geometry survived projection for this sample."""


def so3_exp(r: torch.Tensor) -> torch.Tensor:
    """Differentiable axis-angle exponential with a small-angle series guard.

    The sqrt argument is sanitized before the branch select: masked-out
    branches still backpropagate, and sqrt at zero turns the chain into nan.
    """
    theta2 = (r * r).sum()
    small = theta2 < 1e-16
    safe = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / safe**2)
    zero = torch.zeros((), dtype=r.dtype)
    k = torch.stack([
        torch.stack([zero, -r[2], r[1]]),
        torch.stack([r[2], zero, -r[0]]),
        torch.stack([-r[1], r[0], zero]),
    ])
    eye = torch.eye(3, dtype=r.dtype)
    return eye + a * k + b * (k @ k)


def transformation_loss(r_pred, r_gt, t_pred, t_gt, alpha: float) -> torch.Tensor:
    return alpha * torch.linalg.norm(r_pred - r_gt) + torch.linalg.norm(t_pred - t_gt)


def project(points: torch.Tensor, intr: dict, rot: torch.Tensor, trans: torch.Tensor):
    """Pinhole projection keeping points beyond the near plane.

    Returns continuous (u, v, z) tensors over the kept points plus the kept
    source indices as a numpy array for correspondence bookkeeping.
    """
    cam = points @ rot.T + trans
    z_all = cam[:, 2]
    keep = (z_all > Z_MIN).detach().cpu().numpy()
    idx = np.nonzero(keep)[0]
    sel = torch.from_numpy(idx)
    x, y, z = cam[sel, 0], cam[sel, 1], cam[sel, 2]
    u = intr["fx"] * (x / z) + intr["cx"]
    v = intr["fy"] * (y / z) + intr["cy"]
    return u, v, z, idx


def zbuffer_winners(u, v, z, idx, width: int, height: int):
    """Pixel assignment identical to the pipeline's rasterizer.

    Rounds to pixels, drops out-of-bounds records, and resolves collisions to
    the smallest depth with ties going to the smallest source index.  Returns
    (rows, cols, positions) where positions index into the projected arrays.
    """
    u_np = u.detach().cpu().numpy()
    v_np = v.detach().cpu().numpy()
    z_np = z.detach().cpu().numpy()
    px = np.rint(u_np).astype(np.int64)
    py = np.rint(v_np).astype(np.int64)
    inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    positions = np.nonzero(inside)[0]
    flat = py[inside] * width + px[inside]
    order = np.lexsort((-idx[positions], -z_np[positions]))
    win = np.full(height * width, -1, dtype=np.int64)
    win[flat[order]] = positions[order]
    present = np.nonzero(win >= 0)[0]
    return present // width, present % width, win[present]


def raster_cloud(u, v, z, idx, intr: dict) -> torch.Tensor:
    """Back-projection of the rasterized depth map; depths stay differentiable."""
    rows, cols, pos = zbuffer_winners(u, v, z, idx, intr["width"], intr["height"])
    if pos.size == 0:
        raise DegenerateSampleError("no point rasterizes into the image")
    d = z[torch.from_numpy(pos)]
    cols_t = torch.as_tensor(cols, dtype=d.dtype)
    rows_t = torch.as_tensor(rows, dtype=d.dtype)
    x = (cols_t - intr["cx"]) * d / intr["fx"]
    y = (rows_t - intr["cy"]) * d / intr["fy"]
    return torch.stack([x, y, d], dim=1)


def chamfer_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DegenerateSampleError("Chamfer distance needs two nonempty clouds")
    # the mm-based euclidean shortcut loses ~1e-7 on near-identical clouds
    d = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist")
    return (d.min(dim=1).values ** 2).mean() + (d.min(dim=0).values ** 2).mean()


def depth_map_loss(u_p, v_p, idx_p, u_g, v_g, idx_g) -> torch.Tensor:
    """Mean squared pixel distance over source points visible in both configs."""
    _, ia, ib = np.intersect1d(idx_p, idx_g, assume_unique=True, return_indices=True)
    if ia.size == 0:
        raise DegenerateSampleError(
            "no point projects in front of the camera in both configurations"
        )
    sa, sb = torch.from_numpy(ia), torch.from_numpy(ib)
    du = u_p[sa] - u_g[sb]
    dv = v_p[sa] - v_g[sb]
    return (du * du + dv * dv).mean()


def sample_losses(st, r_pred: torch.Tensor, t_pred: torch.Tensor, alpha: float):
    """The three loss terms for one sample given a predicted correction.

    st carries the constant per-sample tensors including the precomputed
    ground-truth projection and raster cloud.
    """
    lt = transformation_loss(r_pred, st.gt_rotvec, t_pred, st.gt_trans, alpha)
    rot = so3_exp(r_pred) @ st.base_rot
    trans = so3_exp(r_pred) @ st.base_trans + t_pred
    try:
        u, v, z, idx = project(st.points, st.intrinsics, rot, trans)
        ld = depth_map_loss(u, v, idx, st.gt_u, st.gt_v, st.gt_idx)
        lp = chamfer_loss(raster_cloud(u, v, z, idx, st.intrinsics), st.gt_cloud)
    except DegenerateSampleError as exc:
        raise DegenerateSampleError(f"sample {st.sample_id}: {exc}") from exc
    return lt, ld, lp


def weights_at_epoch(lambda_t, lambda_d, lambda_p, decay_factor, epoch: int):
    """Keep the reprojection weight fixed, shrink the other two per epoch."""
    scale = decay_factor**epoch
    return lambda_t * scale, lambda_d, lambda_p * scale
