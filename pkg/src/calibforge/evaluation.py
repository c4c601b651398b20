"""Error metrics, aggregate statistics, and figure-style outputs.

Per-sample records hold the raw errors in radians and meters; summaries
report per-axis mean absolute error in the units used for comparison tables
(degrees, meters) plus histogram and error-versus-miscalibration curves.
Figures are SVG so regeneration is byte-deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera_projection import DepthMap
from .errors import DimensionMismatchError, ImageDecodeError, ValidationError
from .optimizer import CalibrationResult
from .se3 import (
    RigidTransform,
    geodesic_rotation_error,
    matrix_to_euler,
    rotvec_to_matrix,
)

_HIST_BINS = 20

_AXES = ("roll", "pitch", "yaw", "x", "y", "z")


@dataclass
class EvalRecord:
    sample_id: str
    injected_rotvec: tuple
    injected_translation: tuple
    geodesic_error: float
    rotation_error: tuple  # abs roll, pitch, yaw differences, radians
    translation_error: tuple  # abs per-axis differences, meters

    def __post_init__(self):
        errs = (self.geodesic_error, *self.rotation_error, *self.translation_error)
        if any(e < 0 for e in errs):
            raise ValidationError(f"record {self.sample_id}: errors must be >= 0")
        if self.geodesic_error > math.pi + 1e-12:
            raise ValidationError(
                f"record {self.sample_id}: geodesic error {self.geodesic_error} exceeds pi"
            )

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "injected_rotvec": list(self.injected_rotvec),
            "injected_translation": list(self.injected_translation),
            "geodesic_error": self.geodesic_error,
            "rotation_error": list(self.rotation_error),
            "translation_error": list(self.translation_error),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EvalRecord":
        try:
            return cls(
                sample_id=str(obj["sample_id"]),
                injected_rotvec=tuple(obj["injected_rotvec"]),
                injected_translation=tuple(obj["injected_translation"]),
                geodesic_error=float(obj["geodesic_error"]),
                rotation_error=tuple(obj["rotation_error"]),
                translation_error=tuple(obj["translation_error"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed eval record: {obj!r}") from exc


@dataclass
class EvalSummary:
    count: int
    rotation_mae_deg: tuple
    translation_mae_m: tuple
    rotation_mae_mean_deg: float
    mean_geodesic_deg: float
    geodesic_hist: dict
    translation_hist: dict
    curves: dict

    def to_json_dict(self) -> dict:
        return {
            "count": self.count,
            "rotation_mae_deg": list(self.rotation_mae_deg),
            "translation_mae_m": list(self.translation_mae_m),
            "rotation_mae_mean_deg": self.rotation_mae_mean_deg,
            "mean_geodesic_deg": self.mean_geodesic_deg,
            "geodesic_hist": self.geodesic_hist,
            "translation_hist": self.translation_hist,
            "curves": self.curves,
        }


def _predicted_transform(result) -> RigidTransform:
    if isinstance(result, CalibrationResult):
        return result.predicted
    if isinstance(result, RigidTransform):
        return result
    raise ValidationError(f"expected CalibrationResult or RigidTransform, got {type(result)}")


def evaluate_batch(results, manifest) -> list:
    """Build one error record per (sample_id, result) pair.

    Per-axis rotation errors are absolute differences of the fixed-axis XYZ
    Euler decompositions, the same convention the miscalibration sampler
    draws in, so single-axis injections evaluate exactly.
    """
    records = []
    for sample_id, result in results:
        sample = manifest.sample_by_id(sample_id)
        predicted = _predicted_transform(result)
        gt = sample.target
        pred_euler = np.array(matrix_to_euler(predicted.rotation))
        gt_euler = np.array(matrix_to_euler(gt.rotation))
        records.append(
            EvalRecord(
                sample_id=sample_id,
                injected_rotvec=tuple(float(v) for v in sample.miscalibration.rotvec()),
                injected_translation=tuple(float(v) for v in sample.miscalibration.translation),
                geodesic_error=geodesic_rotation_error(predicted.rotation, gt.rotation),
                rotation_error=tuple(float(v) for v in np.abs(pred_euler - gt_euler)),
                translation_error=tuple(
                    float(v) for v in np.abs(predicted.translation - gt.translation)
                ),
            )
        )
    return records


def _histogram(values: np.ndarray) -> dict:
    hi = float(max(np.max(values), 1e-12)) if values.size else 1e-12
    counts, edges = np.histogram(values, bins=_HIST_BINS, range=(0.0, hi))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def summarize(records) -> EvalSummary:
    """Aggregate records into per-axis MAE, histograms, and error curves.

    Histograms use fixed-width bins from zero to the observed maximum
    (geodesic error in degrees, translation error norm in meters).  Both the
    mean of the per-axis rotation MAEs and the mean geodesic error are
    reported since aggregate rotation numbers are quoted both ways.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot summarize zero records")
    rot_err = np.array([r.rotation_error for r in records])
    trans_err = np.array([r.translation_error for r in records])
    geodesic = np.array([r.geodesic_error for r in records])

    rotation_mae_deg = tuple(float(v) for v in np.degrees(rot_err.mean(axis=0)))
    translation_mae_m = tuple(float(v) for v in trans_err.mean(axis=0))

    curves = {}
    injected_euler = np.array(
        [matrix_to_euler(rotvec_to_matrix(r.injected_rotvec)) for r in records]
    )
    injected_trans = np.array([r.injected_translation for r in records])
    for i, axis in enumerate(_AXES[:3]):
        pairs = sorted(
            [float(abs(np.degrees(injected_euler[j, i]))), float(np.degrees(rot_err[j, i]))]
            for j in range(len(records))
        )
        curves[axis] = pairs
    for i, axis in enumerate(_AXES[3:]):
        pairs = sorted(
            [float(abs(injected_trans[j, i])), float(trans_err[j, i])]
            for j in range(len(records))
        )
        curves[axis] = pairs

    return EvalSummary(
        count=len(records),
        rotation_mae_deg=rotation_mae_deg,
        translation_mae_m=translation_mae_m,
        rotation_mae_mean_deg=float(np.mean(rotation_mae_deg)),
        mean_geodesic_deg=float(np.degrees(geodesic.mean())),
        geodesic_hist=_histogram(np.degrees(geodesic)),
        translation_hist=_histogram(np.linalg.norm(trans_err, axis=1)),
        curves=curves,
    )


def render_overlay(image_path, dm: DepthMap, out_path, alpha: float = 0.6) -> None:
    """Blend a blue-to-red depth colormap onto an RGB frame.

    Color runs linearly from blue at the 1st depth percentile to red at the
    99th; missing pixels leave the image untouched.  alpha mixes the colormap
    over the frame (1.0 paints pure colormap values).
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    try:
        with Image.open(image_path) as img:
            frame = np.asarray(img.convert("RGB"), dtype=float)
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {image_path}: {exc}") from exc
    if frame.shape[:2] != (dm.height, dm.width):
        raise DimensionMismatchError(
            f"image is {frame.shape[1]}x{frame.shape[0]}, "
            f"depth map is {dm.width}x{dm.height}"
        )
    out = frame.copy()
    if dm.valid.any():
        depths = dm.depth[dm.valid]
        lo, hi = np.percentile(depths, [1.0, 99.0])
        if hi > lo:
            t = np.clip((depths - lo) / (hi - lo), 0.0, 1.0)
        else:
            t = np.zeros(depths.shape)
        color = np.column_stack([255.0 * t, np.zeros(t.shape), 255.0 * (1.0 - t)])
        out[dm.valid] = (1.0 - alpha) * frame[dm.valid] + alpha * color
    Image.fromarray(np.rint(out).astype(np.uint8), mode="RGB").save(out_path, format="PNG")


def _svg_polyline(points, color, name) -> str:
    coords = " ".join(f"{x:.6g},{y:.6g}" for x, y in points)
    return (
        f'<polyline class="{name}" fill="none" stroke="{color}" '
        f'stroke-width="1.5" points="{coords}" />'
    )


_AXIS_COLORS = {
    "roll": "#c0392b",
    "pitch": "#27ae60",
    "yaw": "#2980b9",
    "x": "#8e44ad",
    "y": "#d35400",
    "z": "#16a085",
}


def _curve_svg(curves: dict) -> str:
    width, height, pad = 640, 400, 40
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white" />',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black" />',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black" />',
        f'<text x="{width // 2}" y="{height - 8}" font-size="12" text-anchor="middle">'
        "injected miscalibration (deg / m)</text>",
        f'<text x="12" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {height // 2})">absolute error (deg / m)</text>',
    ]
    all_x = [p[0] for axis in _AXES for p in curves.get(axis, ())]
    all_y = [p[1] for axis in _AXES for p in curves.get(axis, ())]
    x_max = max(all_x) if all_x else 1.0
    y_max = max(all_y) if all_y else 1.0
    x_max = x_max if x_max > 0 else 1.0
    y_max = y_max if y_max > 0 else 1.0
    for axis in _AXES:
        pts = curves.get(axis, ())
        if not pts:
            continue
        scaled = [
            (
                pad + (width - 2 * pad) * (px / x_max),
                height - pad - (height - 2 * pad) * (py / y_max),
            )
            for px, py in pts
        ]
        lines.append(_svg_polyline(scaled, _AXIS_COLORS[axis], axis))
        lines.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * _AXES.index(axis)}" '
            f'font-size="10" fill="{_AXIS_COLORS[axis]}">{axis}</text>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _hist_svg(geodesic_hist: dict, translation_hist: dict) -> str:
    width, height, pad = 640, 400, 40
    half = (width - 3 * pad) // 2
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white" />',
    ]
    for idx, (hist, label, color) in enumerate(
        [(geodesic_hist, "rotation error (deg)", "#2980b9"),
         (translation_hist, "translation error (m)", "#c0392b")]
    ):
        x0 = pad + idx * (half + pad)
        counts = hist["counts"]
        c_max = max(max(counts), 1)
        bar_w = half / max(len(counts), 1)
        for i, c in enumerate(counts):
            bar_h = (height - 2 * pad) * (c / c_max)
            lines.append(
                f'<rect class="bin" x="{x0 + i * bar_w:.6g}" '
                f'y="{height - pad - bar_h:.6g}" width="{bar_w:.6g}" '
                f'height="{bar_h:.6g}" fill="{color}" />'
            )
        lines.append(
            f'<text x="{x0 + half / 2:.6g}" y="{height - 8}" font-size="12" '
            f'text-anchor="middle">{label}</text>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_report(summary: EvalSummary, out_dir) -> None:
    """Write error_curve.svg, histogram.svg and summary.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "error_curve.svg").write_text(_curve_svg(summary.curves))
    (out_dir / "histogram.svg").write_text(_hist_svg(summary.geodesic_hist, summary.translation_hist))
    (out_dir / "summary.json").write_text(
        json.dumps(summary.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
