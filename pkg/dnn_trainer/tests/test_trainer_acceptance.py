"""Release gate for the trainer: one test per headline criterion, each
printing a PASS/FAIL line with its measured numbers so a tee'd run reads as
a checklist.
"""

import dataclasses
import functools
import json
import subprocess
import sys
import time

import numpy as np
import torch

from calibforge.camera_projection import CameraIntrinsics
from calibforge.dataset import (
    SceneSpec,
    generate_scene,
    load_kitti_velodyne,
    save_kitti_velodyne,
    save_manifest,
    synthesize_samples,
)
from calibforge.losses import LossWeights, total_loss
from calibforge.se3 import MiscalibRange, RigidTransform

from dnn_trainer.data import load_dataset
from dnn_trainer.formats import load_manifest
from dnn_trainer.losses import sample_losses
from dnn_trainer.train import TrainConfig, predict, train

TOY_K = CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64)


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE FAIL: {name}", flush=True)
                raise
            print(f"\nACCEPTANCE PASS: {name} ({detail})", flush=True)
        return wrapper
    return deco


def make_toy_set(root, count, seed):
    scene = generate_scene(SceneSpec("ground-plane-walls", 1200, 20.0, 100))
    save_kitti_velodyne(scene, root / "cloud_0.bin")
    return synthesize_samples(
        ["cloud_0.bin"], TOY_K, RigidTransform.identity(),
        MiscalibRange(np.radians(10.0), 0.2), count, seed,
    )


@criterion("single-sample memorization drives loss below 1% of initial")
def test_memorization(tmp_path):
    manifest = make_toy_set(tmp_path, 1, seed=2)
    save_manifest(manifest, tmp_path / "m.json")
    cfg = TrainConfig(epochs=60, batch_size=1, lr=1e-3, dropout=0.0,
                      lr_decay=1.0, lambda_decay=1.0, seed=0)
    _, log = train(tmp_path / "m.json", cfg, out_dir=tmp_path / "run")
    first = log["epochs"][0]["total"]
    last = log["epochs"][-1]["total"]
    assert last < 0.01 * first
    return f"loss {first:.4g} -> {last:.4g}, ratio {last / first:.2e} within {cfg.epochs} epochs"


@criterion("500-sample toy set: validation geodesic beats injected miscalibration")
def test_toy_set_validation(tmp_path):
    t0 = time.perf_counter()
    manifest = make_toy_set(tmp_path, 500, seed=42)
    train_man = dataclasses.replace(manifest, samples=manifest.samples[:400])
    val_man = dataclasses.replace(manifest, samples=manifest.samples[400:])
    save_manifest(train_man, tmp_path / "train.json")
    save_manifest(val_man, tmp_path / "val.json")
    injected_deg = np.degrees(
        np.mean([np.linalg.norm(s.target.rotvec()) for s in val_man.samples])
    )

    cfg = TrainConfig(epochs=20, batch_size=8, lr=1e-3, dropout=0.1, seed=1)
    ckpt, log = train(tmp_path / "train.json", cfg, out_dir=tmp_path / "run")
    pred = tmp_path / "pred_val.jsonl"
    predict(ckpt, tmp_path / "val.json", pred)

    # score through the pipeline's own evaluator, files only
    out = tmp_path / "evald"
    out.mkdir()
    proc = subprocess.run(
        [sys.executable, "-m", "calibforge.cli", "eval",
         "--manifest", str(tmp_path / "val.json"), "--results", str(pred),
         "--out", str(out), "--no-timestamps"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((out / "summary.json").read_text())
    assert summary["count"] == 100
    got = summary["mean_geodesic_deg"]
    assert got < injected_deg
    elapsed = time.perf_counter() - t0
    return (
        f"validation mean geodesic {got:.3f} deg < injected {injected_deg:.3f} deg "
        f"after {cfg.epochs} epochs, {elapsed:.0f} s"
    )


@criterion("loss components agree with the pipeline within 1e-5 on 20 pairs")
def test_loss_cross_agreement(tmp_path):
    manifest = make_toy_set(tmp_path, 20, seed=17)
    save_manifest(manifest, tmp_path / "m.json")
    ds = load_dataset(load_manifest(tmp_path / "m.json"))
    cloud = load_kitti_velodyne(tmp_path / "cloud_0.bin")
    rng = np.random.default_rng(20260814)
    worst = 0.0
    for st, sample in zip(ds, manifest.samples):
        r = st.gt_rotvec.numpy() + rng.uniform(-0.2, 0.2, 3)
        t = st.gt_trans.numpy() + rng.uniform(-0.2, 0.2, 3)
        lt, ld, lp = sample_losses(st, torch.tensor(r), torch.tensor(t), alpha=1.0)
        want = total_loss(sample, (r, t), LossWeights(), cloud=cloud)
        for got, ref in (
            (lt.item(), want.transformation),
            (ld.item(), want.depth_map),
            (lp.item(), want.point_cloud),
        ):
            worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
    assert worst < 1e-5
    return f"worst relative disagreement {worst:.2e} over 20 pairs x 3 components"
