"""Pinhole projection, depth-map rasterization, back-projection, densification.

The forward path mirrors the calibration pipeline: a LiDAR cloud x is mapped
through an extrinsic transform T, projected with intrinsics into pixel records,
then rasterized into a sparse depth map y (z-buffer, nearest depth wins).  The
reverse path back-projects present pixels onto their viewing rays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatchError, ImageDecodeError, ValidationError
from .se3 import RigidTransform

# Near-plane cutoff in meters: projection divides by z, so points at or behind
# the camera plane are dropped rather than producing unbounded pixels.
Z_MIN = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(
                f"image dimensions must be > 0, got {self.width}x{self.height}"
            )
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_json_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(obj["fx"]),
                fy=float(obj["fy"]),
                cx=float(obj["cx"]),
                cy=float(obj["cy"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad intrinsics JSON: {obj!r}") from exc


class PointCloud:
    """Ordered (N, 3) points in meters, optional per-point intensity.

    Point order is stable through transforms and projection: projected record
    i refers back to input point source_index i.
    """

    __slots__ = ("points", "intensity")

    def __init__(self, points, intensity=None):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValidationError(f"points must be (N, 3), got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValidationError("point coordinates must be finite")
        if intensity is not None:
            intensity = np.asarray(intensity, dtype=float)
            if intensity.shape != (points.shape[0],):
                raise ValidationError(
                    f"intensity must be length {points.shape[0]}, got shape {intensity.shape}"
                )
        self.points = points
        self.intensity = intensity

    def __len__(self) -> int:
        return self.points.shape[0]


class ProjectedPoints:
    """Pixel records (u, v, depth, source_index) for points in front of the camera."""

    __slots__ = ("u", "v", "depth", "source_index")

    def __init__(self, u, v, depth, source_index):
        self.u = np.asarray(u, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.depth = np.asarray(depth, dtype=float)
        self.source_index = np.asarray(source_index, dtype=np.int64)
        n = self.u.shape[0]
        for name, arr in (("v", self.v), ("depth", self.depth), ("source_index", self.source_index)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} length {arr.shape} does not match u length {n}")
        if n and float(np.min(self.depth)) <= 0.0:
            raise ValidationError("projected depths must be > 0")

    def __len__(self) -> int:
        return self.u.shape[0]


class DepthMap:
    """Per-pixel metric depth with an explicit missing mask.

    depth is (height, width) in meters, valid the same-shape boolean mask;
    provenance optionally records the source-point index per present pixel
    (-1 where missing).
    """

    __slots__ = ("depth", "valid", "provenance")

    def __init__(self, depth, valid, provenance=None):
        depth = np.asarray(depth, dtype=float)
        valid = np.asarray(valid, dtype=bool)
        if depth.ndim != 2:
            raise ValidationError(f"depth must be 2-d, got shape {depth.shape}")
        if valid.shape != depth.shape:
            raise DimensionMismatchError(
                f"mask shape {valid.shape} does not match depth shape {depth.shape}"
            )
        if valid.any():
            present = depth[valid]
            if not np.all(np.isfinite(present)) or float(np.min(present)) <= 0.0:
                raise ValidationError("present depths must be finite and > 0")
        if provenance is not None:
            provenance = np.asarray(provenance, dtype=np.int64)
            if provenance.shape != depth.shape:
                raise DimensionMismatchError(
                    f"provenance shape {provenance.shape} does not match depth"
                )
        self.depth = depth
        self.valid = valid
        self.provenance = provenance

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def present_count(self) -> int:
        return int(np.count_nonzero(self.valid))


def transform_cloud(pc: PointCloud, t: RigidTransform) -> PointCloud:
    """Map every point p -> R p + t, preserving order and intensity."""
    return PointCloud(t.apply(pc.points), pc.intensity)


def project(pc: PointCloud, k: CameraIntrinsics, t: RigidTransform) -> ProjectedPoints:
    """Transform into the camera frame and apply the pinhole model.

    Points with camera-frame z <= Z_MIN are dropped; the returned records keep
    the index of the originating point so correspondences survive projection.
    """
    cam = t.apply(pc.points)
    keep = cam[:, 2] > Z_MIN
    cam = cam[keep]
    z = cam[:, 2]
    u = k.fx * (cam[:, 0] / z) + k.cx
    v = k.fy * (cam[:, 1] / z) + k.cy
    return ProjectedPoints(u, v, z, np.nonzero(keep)[0])


def rasterize(pp: ProjectedPoints, k: CameraIntrinsics) -> DepthMap:
    """Round records to pixels and keep the nearest depth per pixel.

    Out-of-bounds records are dropped.  Ties at equal depth go to the record
    with the smallest source index, which keeps the result order-independent.
    """
    px = np.rint(pp.u).astype(np.int64)
    py = np.rint(pp.v).astype(np.int64)
    inside = (px >= 0) & (px < k.width) & (py >= 0) & (py < k.height)
    px, py = px[inside], py[inside]
    depth_in = pp.depth[inside]
    src = pp.source_index[inside]

    depth = np.zeros((k.height, k.width))
    valid = np.zeros((k.height, k.width), dtype=bool)
    provenance = np.full((k.height, k.width), -1, dtype=np.int64)
    # Write depths in decreasing order so the smallest lands last; within a
    # depth tie the smallest source index is written last and wins.
    order = np.lexsort((-src, -depth_in))
    depth[py[order], px[order]] = depth_in[order]
    valid[py[order], px[order]] = True
    provenance[py[order], px[order]] = src[order]
    return DepthMap(depth, valid, provenance)


def back_project(dm: DepthMap, k: CameraIntrinsics) -> PointCloud:
    """Lift present pixels back onto their viewing rays (row-major order)."""
    vs, us = np.nonzero(dm.valid)
    d = dm.depth[vs, us]
    x = (us - k.cx) * d / k.fx
    y = (vs - k.cy) * d / k.fy
    return PointCloud(np.column_stack([x, y, d]))


def densify_maxpool(dm: DepthMap, window: int = 5) -> DepthMap:
    """Fill gaps by a stride-1 max filter over a window x window neighborhood.

    Missing pixels take the maximum present depth nearby; a neighborhood with
    no present pixel stays missing.  Provenance does not survive pooling.
    """
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return DepthMap(dm.depth.copy(), dm.valid.copy(), None)
    # present depths are > 0, so a zero fill never beats a real depth
    filled = np.where(dm.valid, dm.depth, 0.0)
    pooled = ndimage.maximum_filter(filled, size=window, mode="constant", cval=0.0)
    return DepthMap(pooled, pooled > 0.0, None)


def save_depth_png(dm: DepthMap, path) -> None:
    """Write a 16-bit grayscale PNG in millimeters (0 = missing) plus sidecar.

    Depths round to the nearest millimeter and saturate at 65.535 m; the JSON
    sidecar sits next to the image with suffix .json.
    """
    path = Path(path)
    mm = np.where(dm.valid, np.rint(dm.depth * 1000.0), 0.0)
    mm = np.clip(mm, 0.0, 65535.0).astype(np.uint16)
    # rounding can floor a sub-millimeter depth to 0; keep it present
    mm[dm.valid & (mm == 0)] = 1
    img = Image.frombytes("I;16", (mm.shape[1], mm.shape[0]), mm.tobytes())
    img.save(path, format="PNG")
    sidecar = {"width": dm.width, "height": dm.height, "unit": "mm"}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_depth_png(path) -> DepthMap:
    """Read a depth PNG written by :func:`save_depth_png`, checking the sidecar."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.int64)
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode depth image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ImageDecodeError(f"depth image {path} must be single-channel, got shape {arr.shape}")
    sidecar_path = path.with_suffix(".json")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except OSError as exc:
        raise ImageDecodeError(f"missing depth sidecar {sidecar_path}") from exc
    except json.JSONDecodeError as exc:
        raise ImageDecodeError(f"malformed depth sidecar {sidecar_path}: {exc}") from exc
    if sidecar.get("unit") != "mm":
        raise ImageDecodeError(f"depth sidecar {sidecar_path} must declare unit mm")
    if (sidecar.get("width"), sidecar.get("height")) != (arr.shape[1], arr.shape[0]):
        raise DimensionMismatchError(
            f"sidecar says {sidecar.get('width')}x{sidecar.get('height')}, "
            f"image is {arr.shape[1]}x{arr.shape[0]}"
        )
    return DepthMap(arr / 1000.0, arr > 0, None)
