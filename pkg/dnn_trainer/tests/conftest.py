"""Shared fixtures for the trainer tests.

The calibration pipeline package is imported here purely as a test harness
and oracle: it generates the on-disk datasets the trainer consumes and
provides the reference loss values the trainer must reproduce.  The trainer
package itself never imports it.
"""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from calibforge.camera_projection import CameraIntrinsics
from calibforge.dataset import (
    SceneSpec,
    generate_scene,
    save_kitti_velodyne,
    save_manifest,
    synthesize_samples,
)
from calibforge.se3 import MiscalibRange, RigidTransform


@pytest.fixture
def toy_intrinsics():
    return CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def toy_manifest(tmp_path, toy_intrinsics):
    """Factory for small on-disk datasets in the pipeline's serialization."""

    def make(count=4, seed=5, rot_deg=10.0, trans=0.2, points=1200, clouds=1,
             name="manifest.json", intrinsics=None):
        paths = []
        for i in range(clouds):
            p = tmp_path / f"cloud_{i}.bin"
            scene = generate_scene(SceneSpec("ground-plane-walls", points, 20.0, 100 + i))
            save_kitti_velodyne(scene, p)
            paths.append(p.name)
        manifest = synthesize_samples(
            paths, intrinsics or toy_intrinsics, RigidTransform.identity(),
            MiscalibRange(np.radians(rot_deg), trans), count, seed,
        )
        save_manifest(manifest, tmp_path / name)
        return tmp_path / name, manifest

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
