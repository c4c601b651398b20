"""Materialize training tensors from a calibration manifest on disk.

Each sample turns into a constant bundle: normalized network inputs (camera
image plus the depth rendering under the miscalibrated extrinsics) and the
cached ground-truth projection used by the loss terms.  When the pipeline has
exported per-sample depth PNGs those are consumed directly; otherwise the
depth input is rendered here from the point cloud with the same rounding and
z-buffer rules.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .formats import (
    FormatError,
    Manifest,
    ManifestSample,
    compose,
    load_depth_png,
    load_image,
    load_velodyne,
    resolve_path,
)
from .losses import Z_MIN

DEPTH_NORM = 50.0


@dataclass
class SampleTensors:
    """Constant tensors for one sample; everything the loss and net consume."""

    sample_id: str
    points: torch.Tensor
    intrinsics: dict
    base_rot: torch.Tensor
    base_trans: torch.Tensor
    gt_rotvec: torch.Tensor
    gt_trans: torch.Tensor
    rgb: torch.Tensor
    depth: torch.Tensor
    gt_u: torch.Tensor
    gt_v: torch.Tensor
    gt_idx: np.ndarray
    gt_cloud: torch.Tensor


def _project_np(points, intr, rot, trans):
    cam = points @ rot.T + trans
    z = cam[:, 2]
    idx = np.nonzero(z > Z_MIN)[0]
    u = intr["fx"] * (cam[idx, 0] / z[idx]) + intr["cx"]
    v = intr["fy"] * (cam[idx, 1] / z[idx]) + intr["cy"]
    return u, v, z[idx], idx


def _raster_dense(u, v, z, idx, width, height):
    """Dense depth image, zero where empty; nearest depth wins, ties to the
    smallest source index."""
    px = np.rint(u).astype(np.int64)
    py = np.rint(v).astype(np.int64)
    inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    flat = py[inside] * width + px[inside]
    z_in = z[inside]
    order = np.lexsort((-idx[inside], -z_in))
    dense = np.zeros(height * width)
    dense[flat[order]] = z_in[order]
    return dense.reshape(height, width)


def _densify(dense, window: int = 5):
    """Stride-1 max filter treating zeros as missing (zero padding)."""
    if window <= 1:
        return dense
    h, w = dense.shape
    r = window // 2
    padded = np.pad(dense, r)
    pooled = np.zeros_like(dense)
    for dy in range(window):
        for dx in range(window):
            np.maximum(pooled, padded[dy : dy + h, dx : dx + w], out=pooled)
    return pooled


def _back_project_np(dense, intr):
    vs, us = np.nonzero(dense > 0.0)
    d = dense[vs, us]
    x = (us - intr["cx"]) * d / intr["fx"]
    y = (vs - intr["cy"]) * d / intr["fy"]
    return np.column_stack([x, y, d])


def _normalize(dense):
    return np.clip(dense / DEPTH_NORM, 0.0, 1.0)


def _depth_input(sample: ManifestSample, points, intr, eff_rot, eff_trans, depth_dir):
    if depth_dir is not None:
        png = Path(depth_dir) / f"{sample.id}.png"
        meters, valid = load_depth_png(png)
        if meters.shape != (intr["height"], intr["width"]):
            raise ValueError(
                f"{png}: depth map is {meters.shape}, intrinsics say "
                f"({intr['height']}, {intr['width']})"
            )
        dense = np.where(valid, meters, 0.0)
    else:
        u, v, z, idx = _project_np(points, intr, eff_rot, eff_trans)
        dense = _raster_dense(u, v, z, idx, intr["width"], intr["height"])
    return _normalize(_densify(dense))


def _rgb_input(manifest: Manifest, sample: ManifestSample, points, intr):
    """Camera image when the manifest has one, else a synthetic rendering of
    the scene under the true extrinsics repeated over three channels."""
    if sample.image_path is not None:
        return load_image(
            resolve_path(manifest, sample.image_path), intr["width"], intr["height"]
        )
    rot = sample.base_extrinsics.matrix()
    trans = np.asarray(sample.base_extrinsics.translation)
    u, v, z, idx = _project_np(points, intr, rot, trans)
    dense = _normalize(_densify(_raster_dense(u, v, z, idx, intr["width"], intr["height"])))
    return np.repeat(dense[None, :, :], 3, axis=0)


def build_sample(manifest: Manifest, sample: ManifestSample, depth_dir=None) -> SampleTensors:
    intr = dict(sample.intrinsics)
    intr["width"] = int(intr["width"])
    intr["height"] = int(intr["height"])
    points, _ = load_velodyne(resolve_path(manifest, sample.cloud_path))

    # effective (miscalibrated) extrinsics the correction must undo
    eff_rot, eff_trans = compose(sample.miscalibration, sample.base_extrinsics)
    gt_mat = sample.target.matrix()
    gt_rot = gt_mat @ eff_rot
    gt_trans_vec = gt_mat @ eff_trans + np.asarray(sample.target.translation)

    gt_u, gt_v, gt_z, gt_idx = _project_np(points, intr, gt_rot, gt_trans_vec)
    gt_dense = _raster_dense(gt_u, gt_v, gt_z, gt_idx, intr["width"], intr["height"])
    gt_cloud = _back_project_np(gt_dense, intr)

    return SampleTensors(
        sample_id=sample.id,
        points=torch.from_numpy(points),
        intrinsics=intr,
        base_rot=torch.from_numpy(eff_rot),
        base_trans=torch.from_numpy(eff_trans),
        gt_rotvec=torch.tensor(sample.target.rotvec, dtype=torch.float64),
        gt_trans=torch.tensor(sample.target.translation, dtype=torch.float64),
        rgb=torch.from_numpy(
            np.ascontiguousarray(_rgb_input(manifest, sample, points, intr))
        ),
        depth=torch.from_numpy(
            _depth_input(sample, points, intr, eff_rot, eff_trans, depth_dir)
        )[None, :, :],
        gt_u=torch.from_numpy(gt_u),
        gt_v=torch.from_numpy(gt_v),
        gt_idx=gt_idx,
        gt_cloud=torch.from_numpy(gt_cloud),
    )


def load_dataset(manifest: Manifest, depth_dir=None) -> list:
    """All manifest samples as tensor bundles, manifest order preserved.

    Data-format problems are re-raised with the offending sample id attached.
    """
    out = []
    for s in manifest.samples:
        try:
            out.append(build_sample(manifest, s, depth_dir))
        except (FormatError, OSError) as exc:
            raise FormatError(f"sample {s.id}: {exc}") from exc
    if out:
        h0, w0 = out[0].intrinsics["height"], out[0].intrinsics["width"]
        for st in out:
            if (st.intrinsics["height"], st.intrinsics["width"]) != (h0, w0):
                raise ValueError("samples disagree on image size")
    return out


def stack_inputs(batch: list):
    rgb = torch.stack([st.rgb for st in batch])
    depth = torch.stack([st.depth for st in batch])
    return rgb, depth
