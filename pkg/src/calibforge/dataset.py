"""KITTI raw ingestion, synthetic scenes, miscalibration samples, manifests.

A calibration sample pairs a point cloud with a camera and a deliberately
perturbed extrinsic: the stored miscalibration T_rand multiplies the true
extrinsics, and the recovery target is its inverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera_projection import CameraIntrinsics, PointCloud
from .errors import (
    CalibFileError,
    MalformedCalibValueError,
    ManifestFormatError,
    ManifestVersionError,
    MissingCalibKeyError,
    ValidationError,
    VelodyneFormatError,
)
from .se3 import (
    MiscalibRange,
    RigidTransform,
    check_rotation,
    compose,
    invert,
    matrix_to_euler,
    nearest_rotation,
    sample_random_transform,
)

MANIFEST_SCHEMA_VERSION = 1

SCENE_KINDS = ("random-frustum", "ground-plane-walls", "boxes")

# Fallback image size when the calibration file carries no S_rect_02 entry.
DEFAULT_IMAGE_SIZE = (1242, 375)


@dataclass
class CalibSample:
    """One miscalibrated frame: cloud + camera + perturbation + recovery target."""

    id: str
    cloud_path: str
    image_path: str | None
    intrinsics: CameraIntrinsics
    base_extrinsics: RigidTransform
    miscalibration: RigidTransform
    target: RigidTransform

    def __post_init__(self):
        if not self.id:
            raise ValidationError("sample id must be nonempty")
        if not compose(self.target, self.miscalibration).allclose(
            RigidTransform.identity(), tol=1e-9
        ):
            raise ValidationError(
                f"sample {self.id}: target must invert the miscalibration"
            )

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "cloud_path": self.cloud_path,
            "image_path": self.image_path,
            "intrinsics": self.intrinsics.to_json_dict(),
            "base_extrinsics": self.base_extrinsics.to_json_dict(),
            "miscalibration": self.miscalibration.to_json_dict(),
            "target": self.target.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CalibSample":
        try:
            return cls(
                id=str(obj["id"]),
                cloud_path=str(obj["cloud_path"]),
                image_path=None if obj.get("image_path") is None else str(obj["image_path"]),
                intrinsics=CameraIntrinsics.from_json_dict(obj["intrinsics"]),
                base_extrinsics=RigidTransform.from_json_dict(obj["base_extrinsics"]),
                miscalibration=RigidTransform.from_json_dict(obj["miscalibration"]),
                target=RigidTransform.from_json_dict(obj["target"]),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestFormatError(f"malformed sample record: {exc}") from exc


@dataclass
class DatasetManifest:
    schema_version: int
    seed: int
    range: MiscalibRange
    samples: list = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestFormatError(f"duplicate sample ids: {dupes}")
        for s in self.samples:
            roll, pitch, yaw = matrix_to_euler(s.miscalibration.rotation)
            if max(abs(roll), abs(pitch), abs(yaw)) > self.range.rot_max + 1e-9:
                raise ManifestFormatError(
                    f"sample {s.id}: miscalibration rotation exceeds range"
                )
            if np.max(np.abs(s.miscalibration.translation)) > self.range.trans_max + 1e-9:
                raise ManifestFormatError(
                    f"sample {s.id}: miscalibration translation exceeds range"
                )

    def sample_by_id(self, sample_id: str) -> CalibSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        from .errors import UnknownSampleIdError

        raise UnknownSampleIdError(f"no sample with id {sample_id!r} in manifest")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    point_count: int
    extent: float
    seed: int

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValidationError(f"scene kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.point_count <= 0:
            raise ValidationError(f"point_count must be > 0, got {self.point_count}")
        if self.extent <= 0:
            raise ValidationError(f"extent must be > 0, got {self.extent}")


def load_kitti_velodyne(path) -> PointCloud:
    """Parse little-endian float32 (x, y, z, reflectance) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise VelodyneFormatError(
            f"{path}: {len(raw)} bytes is not a whole number of 16-byte records"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    return PointCloud(data[:, :3], data[:, 3])


def save_kitti_velodyne(pc: PointCloud, path) -> None:
    """Write the binary record format read by :func:`load_kitti_velodyne`."""
    intensity = pc.intensity if pc.intensity is not None else np.zeros(len(pc))
    records = np.column_stack([pc.points, intensity]).astype("<f4")
    Path(path).write_bytes(records.tobytes())


def _parse_calib_text(path) -> dict:
    """Read `KEY: v1 v2 ...` lines; values stay raw strings until requested."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CalibFileError(f"cannot read calibration file {path}: {exc}") from exc
    entries = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            continue
        entries[key.strip()] = rest.split()
    return entries


def _require_floats(entries: dict, key: str, path, count: int) -> np.ndarray:
    if key not in entries:
        raise MissingCalibKeyError(f"{path}: calibration key {key!r} missing")
    try:
        values = np.array([float(v) for v in entries[key]])
    except ValueError as exc:
        raise MalformedCalibValueError(f"{path}: key {key!r} has a non-numeric value") from exc
    if values.size != count:
        raise MalformedCalibValueError(
            f"{path}: key {key!r} needs {count} values, got {values.size}"
        )
    return values


def load_kitti_calibration(cam_to_cam_path, velo_to_cam_path):
    """Fold the rectified projection chain into (pinhole intrinsics, extrinsics).

    The projection y = P_rect_02 R_rect T_velo x factors as K [I|b] R_rect
    T_velo with b = K^-1 P_rect[:, 3], so the returned extrinsics include the
    rectification rotation and the camera baseline offset; any skew term of
    P_rect is ignored.
    """
    cam = _parse_calib_text(cam_to_cam_path)
    velo = _parse_calib_text(velo_to_cam_path)

    p_rect = _require_floats(cam, "P_rect_02", cam_to_cam_path, 12).reshape(3, 4)
    r_rect = _require_floats(cam, "R_rect_00", cam_to_cam_path, 9).reshape(3, 3)
    rot = _require_floats(velo, "R", velo_to_cam_path, 9).reshape(3, 3)
    trans = _require_floats(velo, "T", velo_to_cam_path, 3)

    if "S_rect_02" in cam:
        size = _require_floats(cam, "S_rect_02", cam_to_cam_path, 2)
        width, height = int(round(size[0])), int(round(size[1]))
    else:
        width, height = DEFAULT_IMAGE_SIZE

    fx, fy = p_rect[0, 0], p_rect[1, 1]
    cx, cy = p_rect[0, 2], p_rect[1, 2]
    intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

    # file precision: accept up to 1e-4 deviation, then snap onto SO(3)
    r_rect = nearest_rotation(check_rotation(r_rect, tol=1e-4))
    rot = nearest_rotation(check_rotation(rot, tol=1e-4))

    baseline = np.array(
        [
            (p_rect[0, 3] - cx * p_rect[2, 3]) / fx,
            (p_rect[1, 3] - cy * p_rect[2, 3]) / fy,
            p_rect[2, 3],
        ]
    )
    extrinsics = compose(
        RigidTransform(np.eye(3), baseline),
        compose(RigidTransform(r_rect, np.zeros(3)), RigidTransform(rot, trans)),
    )
    return intrinsics, extrinsics


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Deterministic synthetic geometry in the camera frame (z forward)."""
    rng = np.random.default_rng(spec.seed)
    n, ext = spec.point_count, spec.extent
    if spec.kind == "random-frustum":
        z = rng.uniform(2.0, ext, n)
        x = z * rng.uniform(-0.8, 0.8, n)
        y = z * rng.uniform(-0.25, 0.25, n)
        pts = np.column_stack([x, y, z])
    elif spec.kind == "ground-plane-walls":
        # back plane z = ext plus two side walls x = +-ext/2
        n_back = n - 2 * (n // 3)
        n_side = n // 3
        bx = rng.uniform(-0.5 * ext, 0.5 * ext, n_back)
        by = rng.uniform(-0.25 * ext, 0.25 * ext, n_back)
        back = np.column_stack([bx, by, np.full(n_back, ext)])
        walls = []
        for sign in (-1.0, 1.0):
            wy = rng.uniform(-0.25 * ext, 0.25 * ext, n_side)
            wz = rng.uniform(2.0, ext, n_side)
            walls.append(np.column_stack([np.full(n_side, sign * 0.5 * ext), wy, wz]))
        pts = np.vstack([back] + walls)
    else:  # boxes
        n_boxes = 4
        centers = np.column_stack(
            [
                rng.uniform(-0.4 * ext, 0.4 * ext, n_boxes),
                rng.uniform(-0.15 * ext, 0.15 * ext, n_boxes),
                rng.uniform(0.3 * ext, 0.9 * ext, n_boxes),
            ]
        )
        half = rng.uniform(0.05 * ext, 0.15 * ext, size=(n_boxes, 3))
        box = rng.integers(0, n_boxes, n)
        face = rng.integers(0, 6, n)
        local = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        local[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        pts = centers[box] + local * half[box]
    return PointCloud(pts, intensity=rng.uniform(0.0, 1.0, n))


def synthesize_samples(
    cloud_paths: list,
    intrinsics: CameraIntrinsics,
    base: RigidTransform,
    bounds: MiscalibRange,
    count: int,
    seed: int,
) -> DatasetManifest:
    """Draw one random miscalibration per sample, cycling clouds round-robin.

    Per-sample randomness comes from numpy SeedSequence([seed, index]), so any
    sample is reproducible without replaying the whole stream.
    """
    if count <= 0:
        raise ValidationError(f"count must be > 0, got {count}")
    if not cloud_paths:
        raise ValidationError("need at least one cloud path")
    samples = []
    for i in range(count):
        t_rand = sample_random_transform(bounds, np.random.SeedSequence([seed, i]))
        samples.append(
            CalibSample(
                id=f"sample_{i:05d}",
                cloud_path=str(cloud_paths[i % len(cloud_paths)]),
                image_path=None,
                intrinsics=intrinsics,
                base_extrinsics=base,
                miscalibration=t_rand,
                target=invert(t_rand),
            )
        )
    return DatasetManifest(
        schema_version=MANIFEST_SCHEMA_VERSION, seed=seed, range=bounds, samples=samples
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    obj = {
        "schema_version": manifest.schema_version,
        "seed": manifest.seed,
        "range": {"rot_max": manifest.range.rot_max, "trans_max": manifest.range.trans_max},
        "samples": [s.to_json_dict() for s in manifest.samples],
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ManifestFormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ManifestFormatError(f"manifest {path} must be a JSON object")
    version = obj.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestVersionError(
            f"manifest {path} has schema_version {version!r}, "
            f"this build reads {MANIFEST_SCHEMA_VERSION}"
        )
    try:
        bounds = MiscalibRange(
            rot_max=float(obj["range"]["rot_max"]),
            trans_max=float(obj["range"]["trans_max"]),
        )
        seed = int(obj["seed"])
        sample_objs = obj["samples"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f"manifest {path} is missing fields: {exc}") from exc
    if not isinstance(sample_objs, list):
        raise ManifestFormatError(f"manifest {path}: samples must be a list")
    samples = [CalibSample.from_json_dict(s) for s in sample_objs]
    return DatasetManifest(
        schema_version=MANIFEST_SCHEMA_VERSION, seed=seed, range=bounds, samples=samples
    )
