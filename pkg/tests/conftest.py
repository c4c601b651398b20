"""Shared independent oracles used across the test suite.

These deliberately avoid the library's own code paths: rotations go through
unit quaternions, rigid transforms through dense 4x4 homogeneous matrices.
"""

import math

import numpy as np
import pytest

from calibforge.camera_projection import CameraIntrinsics
from calibforge.dataset import (
    CalibSample,
    SceneSpec,
    generate_scene,
    save_kitti_velodyne,
)
from calibforge.se3 import (
    MiscalibRange,
    RigidTransform,
    invert,
    sample_random_transform,
)


def quat_exp(rotvec):
    """Unit-quaternion exponential of an axis-angle vector."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = rotvec / theta
    half = theta / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotvec_to_matrix_oracle(rotvec):
    return quat_to_matrix(quat_exp(rotvec))


def homogeneous(t: RigidTransform) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = t.rotation
    out[:3, 3] = t.translation
    return out


def random_transform(rng) -> RigidTransform:
    """Moderately sized random pose, independent of any fixed seed chain."""
    return sample_random_transform(
        MiscalibRange(rot_max=np.pi * 0.9, trans_max=5.0), int(rng.integers(0, 2**63 - 1))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


SCENE_K = CameraIntrinsics(fx=350.0, fy=350.0, cx=320.0, cy=100.0, width=640, height=200)


@pytest.fixture
def scene_sample(tmp_path):
    """Factory for a miscalibrated synthetic sample with its cloud on disk."""

    def make(
        seed=0,
        rot_deg=5.0,
        trans=0.1,
        n=2000,
        kind="ground-plane-walls",
        extent=20.0,
    ):
        cloud = generate_scene(SceneSpec(kind=kind, point_count=n, extent=extent, seed=seed))
        path = tmp_path / f"scene_{kind}_{seed}.bin"
        save_kitti_velodyne(cloud, path)
        bounds = MiscalibRange(rot_max=math.radians(rot_deg), trans_max=trans)
        t_rand = sample_random_transform(bounds, 1000 + seed)
        sample = CalibSample(
            id=f"s{seed:04d}",
            cloud_path=str(path),
            image_path=None,
            intrinsics=SCENE_K,
            base_extrinsics=RigidTransform.identity(),
            miscalibration=t_rand,
            target=invert(t_rand),
        )
        return sample, cloud

    return make
