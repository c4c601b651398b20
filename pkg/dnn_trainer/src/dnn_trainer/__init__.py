"""Trains a small two-branch network to regress extrinsic miscalibration.

The package talks to the calibration pipeline through files only: it reads
dataset manifests, velodyne scans, depth PNGs and camera images, and writes
predictions as JSON-lines that the pipeline's evaluator consumes directly.
"""

__version__ = "0.1.0"

from .formats import (
    FormatError,
    Manifest,
    ManifestSample,
    Pose,
    load_manifest,
    write_predictions,
)
from .network import NetworkSpec, TwoBranchNet, build_network
from .train import TrainConfig, load_checkpoint, predict, train

__all__ = [
    "FormatError",
    "Manifest",
    "ManifestSample",
    "NetworkSpec",
    "Pose",
    "TrainConfig",
    "TwoBranchNet",
    "build_network",
    "load_checkpoint",
    "load_manifest",
    "predict",
    "train",
    "write_predictions",
]
