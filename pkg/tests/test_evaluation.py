import json
import math

import numpy as np
import pytest
from PIL import Image

from calibforge.camera_projection import DepthMap
from calibforge.dataset import CalibSample, DatasetManifest
from calibforge.errors import (
    DimensionMismatchError,
    ImageDecodeError,
    UnknownSampleIdError,
    ValidationError,
)
from calibforge.evaluation import (
    EvalRecord,
    evaluate_batch,
    render_overlay,
    render_report,
    summarize,
)
from calibforge.se3 import (
    MiscalibRange,
    RigidTransform,
    euler_to_matrix,
    invert,
    sample_random_transform,
)

from conftest import SCENE_K


def make_manifest(transforms, bounds=MiscalibRange(0.2, 0.3)):
    samples = [
        CalibSample(
            id=f"s{i:03d}",
            cloud_path="cloud.bin",
            image_path=None,
            intrinsics=SCENE_K,
            base_extrinsics=RigidTransform.identity(),
            miscalibration=t,
            target=invert(t),
        )
        for i, t in enumerate(transforms)
    ]
    return DatasetManifest(schema_version=1, seed=0, range=bounds, samples=samples)


def test_perfect_predictions_give_zero_records():
    transforms = [sample_random_transform(MiscalibRange(0.15, 0.2), s) for s in range(10)]
    manifest = make_manifest(transforms)
    results = [(s.id, s.target) for s in manifest.samples]
    records = evaluate_batch(results, manifest)
    for r in records:
        assert r.geodesic_error == 0.0
        assert r.rotation_error == (0.0, 0.0, 0.0)
        assert r.translation_error == (0.0, 0.0, 0.0)


def test_identity_predictions_equal_injected_magnitudes():
    transforms = [sample_random_transform(MiscalibRange(0.15, 0.2), s) for s in range(20)]
    manifest = make_manifest(transforms)
    results = [(s.id, RigidTransform.identity()) for s in manifest.samples]
    records = evaluate_batch(results, manifest)
    for rec, s in zip(records, manifest.samples):
        injected_angle = float(np.linalg.norm(s.miscalibration.rotvec()))
        assert abs(rec.geodesic_error - injected_angle) < 1e-12
        # per Eq-style evaluation the translation error is |0 - t_target|
        assert np.array_equal(rec.translation_error, tuple(np.abs(s.target.translation)))
        assert abs(
            np.linalg.norm(rec.translation_error)
            - np.linalg.norm(s.miscalibration.translation)
        ) < 1e-12


def test_single_axis_rotations_decompose_exactly():
    angle = math.radians(7.5)
    for axis_index, euler in enumerate(
        [(angle, 0.0, 0.0), (0.0, angle, 0.0), (0.0, 0.0, angle)]
    ):
        t = RigidTransform(euler_to_matrix(*euler), np.zeros(3))
        manifest = make_manifest([t])
        records = evaluate_batch([("s000", RigidTransform.identity())], manifest)
        err = np.array(records[0].rotation_error)
        assert abs(err[axis_index] - angle) < 1e-12
        others = np.delete(err, axis_index)
        assert np.max(others) < 1e-12


def test_evaluate_batch_id_and_type_errors():
    manifest = make_manifest([sample_random_transform(MiscalibRange(0.1, 0.1), 0)])
    with pytest.raises(UnknownSampleIdError):
        evaluate_batch([("ghost", RigidTransform.identity())], manifest)
    with pytest.raises(ValidationError):
        evaluate_batch([("s000", "not a transform")], manifest)


def test_record_validation_and_json():
    with pytest.raises(ValidationError):
        EvalRecord("a", (0, 0, 0), (0, 0, 0), -0.1, (0, 0, 0), (0, 0, 0))
    with pytest.raises(ValidationError):
        EvalRecord("a", (0, 0, 0), (0, 0, 0), 4.0, (0, 0, 0), (0, 0, 0))
    rec = EvalRecord("a", (0.1, 0.0, 0.0), (0.0, 0.1, 0.0), 0.1, (0.1, 0.0, 0.0), (0.0, 0.1, 0.0))
    back = EvalRecord.from_json_dict(rec.to_json_dict())
    assert back == rec
    with pytest.raises(ValidationError):
        EvalRecord.from_json_dict({"sample_id": "a"})


def _scripted_record(i, rot_deg, trans):
    rot = tuple(math.radians(v) for v in rot_deg)
    return EvalRecord(
        sample_id=f"r{i}",
        injected_rotvec=(0.05, 0.0, 0.0),
        injected_translation=(0.1, 0.0, 0.0),
        geodesic_error=float(np.linalg.norm(rot)),
        rotation_error=rot,
        translation_error=tuple(trans),
    )


def test_summarize_scripted_mean():
    records = [
        _scripted_record(0, (0.1, 0.2, 0.4), (0.01, 0.02, 0.03)),
        _scripted_record(1, (0.3, 0.4, 0.6), (0.03, 0.04, 0.05)),
    ]
    s = summarize(records)
    assert abs(s.rotation_mae_deg[0] - 0.2) < 1e-12
    assert abs(s.rotation_mae_deg[1] - 0.3) < 1e-12
    assert abs(s.rotation_mae_deg[2] - 0.5) < 1e-12
    assert np.max(np.abs(np.array(s.translation_mae_m) - [0.02, 0.03, 0.04])) < 1e-12
    assert abs(s.rotation_mae_mean_deg - np.mean([0.2, 0.3, 0.5])) < 1e-12
    assert s.count == 2


def test_summarize_matches_direct_means(rng):
    records = []
    for i in range(300):
        rot = rng.uniform(0, 0.05, 3)
        trans = rng.uniform(0, 0.1, 3)
        records.append(
            EvalRecord(
                sample_id=f"r{i}",
                injected_rotvec=tuple(rng.uniform(-0.2, 0.2, 3)),
                injected_translation=tuple(rng.uniform(-0.3, 0.3, 3)),
                geodesic_error=float(np.linalg.norm(rot)),
                rotation_error=tuple(rot),
                translation_error=tuple(trans),
            )
        )
    s = summarize(records)
    rot_all = np.array([r.rotation_error for r in records])
    trans_all = np.array([r.translation_error for r in records])
    assert np.max(np.abs(np.degrees(rot_all.mean(0)) - s.rotation_mae_deg)) < 1e-12
    assert np.max(np.abs(trans_all.mean(0) - s.translation_mae_m)) < 1e-12
    geo = np.array([r.geodesic_error for r in records])
    assert abs(s.mean_geodesic_deg - math.degrees(geo.mean())) < 1e-12
    # permutation invariance up to summation reassociation
    shuffled = [records[i] for i in rng.permutation(len(records))]
    s2 = summarize(shuffled)
    assert np.max(np.abs(np.array(s2.rotation_mae_deg) - s.rotation_mae_deg)) < 1e-12
    assert np.max(np.abs(np.array(s2.translation_mae_m) - s.translation_mae_m)) < 1e-12
    assert sorted(s2.geodesic_hist["counts"]) == sorted(s.geodesic_hist["counts"])


def test_summarize_histogram_matches_binning_oracle(rng):
    records = []
    for i in range(1000):
        rot = rng.uniform(0, 0.08, 3)
        records.append(
            EvalRecord(
                sample_id=f"r{i}",
                injected_rotvec=(0.0, 0.0, 0.0),
                injected_translation=(0.0, 0.0, 0.0),
                geodesic_error=float(np.linalg.norm(rot)),
                rotation_error=tuple(rot),
                translation_error=tuple(rng.uniform(0, 0.2, 3)),
            )
        )
    s = summarize(records)
    for hist, values in (
        (s.geodesic_hist, np.degrees([r.geodesic_error for r in records])),
        (s.translation_hist, [np.linalg.norm(r.translation_error) for r in records]),
    ):
        edges = hist["edges"]
        assert len(edges) == len(hist["counts"]) + 1
        width = edges[1] - edges[0]
        oracle = [0] * len(hist["counts"])
        for v in values:
            idx = min(int(v / width), len(oracle) - 1)
            oracle[idx] += 1
        assert hist["counts"] == oracle
        assert sum(hist["counts"]) == 1000


def test_summarize_rejects_empty_and_handles_zero():
    with pytest.raises(ValidationError):
        summarize([])
    zero = EvalRecord("z", (0, 0, 0), (0, 0, 0), 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    s = summarize([zero])
    assert s.rotation_mae_deg == (0.0, 0.0, 0.0)
    assert s.translation_mae_m == (0.0, 0.0, 0.0)
    assert s.mean_geodesic_deg == 0.0
    assert sum(s.geodesic_hist["counts"]) == 1


def test_summarize_curves_are_sorted_by_injection(rng):
    transforms = [sample_random_transform(MiscalibRange(0.15, 0.2), s) for s in range(30)]
    manifest = make_manifest(transforms)
    records = evaluate_batch(
        [(s.id, RigidTransform.identity()) for s in manifest.samples], manifest
    )
    s = summarize(records)
    assert set(s.curves) == {"roll", "pitch", "yaw", "x", "y", "z"}
    for axis, pairs in s.curves.items():
        assert len(pairs) == 30
        injected = [p[0] for p in pairs]
        assert injected == sorted(injected)


def _rgb_image(tmp_path, w, h, name="frame.png"):
    rng = np.random.default_rng(1)
    arr = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
    path = tmp_path / name
    Image.fromarray(arr, mode="RGB").save(path)
    return path, arr


def test_overlay_all_missing_keeps_image(tmp_path):
    path, arr = _rgb_image(tmp_path, 64, 48)
    dm = DepthMap(np.zeros((48, 64)), np.zeros((48, 64), dtype=bool))
    out = tmp_path / "out.png"
    render_overlay(path, dm, out)
    result = np.asarray(Image.open(out).convert("RGB"))
    assert np.array_equal(result, arr)


def test_overlay_min_depth_is_pure_blue(tmp_path):
    path, _ = _rgb_image(tmp_path, 32, 24)
    depth = np.zeros((24, 32))
    valid = np.zeros((24, 32), dtype=bool)
    depth[5, 7], valid[5, 7] = 2.0, True
    depth[20, 30], valid[20, 30] = 50.0, True
    out = tmp_path / "out.png"
    render_overlay(path, DepthMap(depth, valid), out, alpha=1.0)
    result = np.asarray(Image.open(out).convert("RGB"))
    assert tuple(result[5, 7]) == (0, 0, 255)
    assert tuple(result[20, 30]) == (255, 0, 0)


def test_overlay_errors(tmp_path):
    path, _ = _rgb_image(tmp_path, 32, 24)
    dm = DepthMap(np.zeros((10, 10)), np.zeros((10, 10), dtype=bool))
    with pytest.raises(DimensionMismatchError):
        render_overlay(path, dm, tmp_path / "out.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    with pytest.raises(ImageDecodeError):
        render_overlay(bad, dm, tmp_path / "out.png")
    with pytest.raises(ValidationError):
        render_overlay(path, dm, tmp_path / "out.png", alpha=1.5)


def test_overlay_deterministic(tmp_path):
    path, _ = _rgb_image(tmp_path, 40, 30)
    rng = np.random.default_rng(2)
    valid = rng.uniform(size=(30, 40)) < 0.3
    depth = np.where(valid, rng.uniform(1, 40, size=(30, 40)), 0.0)
    dm = DepthMap(depth, valid)
    out1, out2 = tmp_path / "o1.png", tmp_path / "o2.png"
    render_overlay(path, dm, out1)
    render_overlay(path, dm, out2)
    assert out1.read_bytes() == out2.read_bytes()


def _summary_for_report(rng, n=40):
    transforms = [sample_random_transform(MiscalibRange(0.15, 0.2), s) for s in range(n)]
    manifest = make_manifest(transforms)
    records = evaluate_batch(
        [(s.id, RigidTransform.identity()) for s in manifest.samples], manifest
    )
    return summarize(records)


def test_render_report_structure_and_determinism(tmp_path, rng):
    summary = _summary_for_report(rng)
    out1 = tmp_path / "rep1"
    out2 = tmp_path / "rep2"
    render_report(summary, out1)
    render_report(summary, out2)
    for name in ("error_curve.svg", "histogram.svg", "summary.json"):
        assert (out1 / name).exists()
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    curve = (out1 / "error_curve.svg").read_text()
    for axis in ("roll", "pitch", "yaw", "x", "y", "z"):
        assert curve.count(f'class="{axis}"') == 1
    hist = (out1 / "histogram.svg").read_text()
    assert hist.count('class="bin"') == 40
    loaded = json.loads((out1 / "summary.json").read_text())
    assert loaded == summary.to_json_dict()


def test_render_report_zero_summary(tmp_path):
    zero = EvalRecord("z", (0, 0, 0), (0, 0, 0), 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    summary = summarize([zero])
    render_report(summary, tmp_path / "rep")
    curve = (tmp_path / "rep" / "error_curve.svg").read_text()
    assert "<polyline" in curve


def test_geodesic_identity_batch(rng):
    # zero error over many random truths when prediction equals truth
    transforms = [sample_random_transform(MiscalibRange(0.5, 0.5), s) for s in range(1000)]
    manifest = make_manifest(transforms, bounds=MiscalibRange(0.5, 0.5))
    records = evaluate_batch([(s.id, s.target) for s in manifest.samples], manifest)
    assert all(r.geodesic_error == 0.0 for r in records)