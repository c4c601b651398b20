"""Readers and writers for the calibration pipeline's file formats.

Everything here works from the serialized artifacts alone: manifest JSON,
velodyne float32 scans, 16-bit millimeter depth PNGs with their JSON sidecar,
and the predictions JSON-lines the evaluator ingests.  Transforms are stored
as (rotation vector, translation) pairs and expanded to matrices on demand.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_SCHEMA_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the pipeline's serialization."""


def rotvec_to_matrix(r):
    """Axis-angle exponential; series expansion below 1e-8 radians."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    k = np.array([
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
    ])
    if theta < 1e-8:
        a, b = 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0
    else:
        a, b = np.sin(theta) / theta, (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform as stored in the manifest."""

    rotvec: tuple
    translation: tuple

    def matrix(self):
        return rotvec_to_matrix(self.rotvec)

    @classmethod
    def from_json_dict(cls, obj):
        try:
            return cls(tuple(float(v) for v in obj["rotvec"]),
                       tuple(float(v) for v in obj["translation"]))
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed transform entry: {obj!r}")


def compose(a: Pose, b: Pose):
    """Rotation and translation of applying b first, then a."""
    ra, rb = a.matrix(), b.matrix()
    return ra @ rb, ra @ np.asarray(b.translation) + np.asarray(a.translation)


@dataclass(frozen=True)
class ManifestSample:
    id: str
    cloud_path: str
    image_path: object
    intrinsics: dict
    base_extrinsics: Pose
    miscalibration: Pose
    target: Pose


@dataclass(frozen=True)
class Manifest:
    seed: int
    samples: tuple
    path: Path


_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError:
        raise FormatError(f"manifest is not valid JSON: {path}")
    if obj.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(
            f"unsupported manifest schema {obj.get('schema_version')!r} in {path}"
        )
    samples = []
    for entry in obj.get("samples", []):
        try:
            intr = {k: entry["intrinsics"][k] for k in _INTRINSIC_KEYS}
            samples.append(ManifestSample(
                id=entry["id"],
                cloud_path=entry["cloud_path"],
                image_path=entry.get("image_path"),
                intrinsics=intr,
                base_extrinsics=Pose.from_json_dict(entry["base_extrinsics"]),
                miscalibration=Pose.from_json_dict(entry["miscalibration"]),
                target=Pose.from_json_dict(entry["target"]),
            ))
        except (KeyError, TypeError):
            raise FormatError(f"malformed sample entry in {path}")
    return Manifest(seed=int(obj.get("seed", 0)), samples=tuple(samples), path=path)


def resolve_path(manifest: Manifest, stored: str) -> Path:
    p = Path(stored)
    return p if p.is_absolute() else manifest.path.parent / p


def load_velodyne(path):
    """float32 (x, y, z, intensity) records; returns float64 points and intensity."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(f"scan length {len(raw)} is not a whole number of records: {path}")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64)


def load_depth_png(path):
    """16-bit millimeter depth PNG plus sidecar; returns (depth_m, valid)."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError):
        raise FormatError(f"missing or malformed depth sidecar: {sidecar}")
    if meta.get("unit") != "mm":
        raise FormatError(f"unsupported depth unit {meta.get('unit')!r} in {sidecar}")
    try:
        img = Image.open(path)
        mm = np.asarray(img, dtype=np.uint16)
    except Exception:
        raise FormatError(f"undecodable depth image: {path}")
    if mm.shape != (meta["height"], meta["width"]):
        raise FormatError(
            f"depth image is {mm.shape[1]}x{mm.shape[0]} but sidecar says "
            f"{meta['width']}x{meta['height']}"
        )
    depth = mm.astype(np.float64) / 1000.0
    return depth, mm > 0


def load_image(path, width, height):
    """RGB image as float64 (3, H, W) in [0, 1]; dimensions must match."""
    try:
        img = Image.open(path).convert("RGB")
    except Exception:
        raise FormatError(f"undecodable image: {path}")
    if img.size != (width, height):
        raise FormatError(f"image is {img.size}, expected {(width, height)}: {path}")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.moveaxis(arr, 2, 0)


def write_predictions(path, rows) -> None:
    """JSON-lines of {sample_id, predicted: {rotvec, translation}} entries."""
    with Path(path).open("w") as fh:
        for sample_id, rotvec, translation in rows:
            fh.write(json.dumps({
                "predicted": {
                    "rotvec": [float(v) for v in rotvec],
                    "translation": [float(v) for v in translation],
                },
                "sample_id": sample_id,
            }, sort_keys=True) + "\n")
