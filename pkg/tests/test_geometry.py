import json

import numpy as np
import pytest

from duocap.geometry import (
    BehindCameraError,
    CameraRig,
    CameraView,
    DegenerateInputError,
    GeometryError,
    atomic_write_text,
    load_rig,
    procrustes_align,
    project,
    project_points,
    reprojection_error,
    rig_from_dict,
    rig_to_dict,
    save_rig,
)

from conftest import random_rotation, ring_rig


def axis_camera(cam_id=0, f=1000.0, cx=960.0, cy=540.0):
    """Camera at the origin looking down +z with axis-aligned rows."""
    return CameraView(
        cam_id=cam_id,
        intrinsics=np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]]),
        rotation=np.eye(3),
        translation=np.zeros(3),
        resolution=(1920, 1080),
    )


def test_project_hand_computed():
    cam = axis_camera()
    # x/z = 0.05, y/z = -0.1 at f = 1000
    pix = project(cam, [0.1, -0.2, 2.0])
    np.testing.assert_allclose(pix, [960.0 + 50.0, 540.0 - 100.0], atol=1e-12)


def test_project_point_behind_camera_raises():
    cam = axis_camera()
    with pytest.raises(BehindCameraError):
        project(cam, [0.0, 0.0, -1.0])


def test_project_points_matches_scalar_projection():
    rng = np.random.default_rng(11)
    cam = ring_rig(6).cameras[2]
    pts = rng.normal([0.0, 0.0, 0.9], 0.5, size=(40, 3))
    batch, depth = project_points(cam, pts)
    assert np.all(depth > 0)
    for i in range(len(pts)):
        np.testing.assert_allclose(batch[i], project(cam, pts[i]), atol=1e-10)


def test_reprojection_error_zero_for_exact_pixel():
    cam = axis_camera()
    p = np.array([0.3, 0.1, 2.5])
    assert reprojection_error(cam, p, project(cam, p)) < 1e-12


def test_camera_validation_rejects_bad_rotation():
    with pytest.raises(GeometryError):
        CameraView(
            cam_id=0,
            intrinsics=np.array([[1000.0, 0, 960], [0, 1000.0, 540], [0, 0, 1]]),
            rotation=np.eye(3) * 2.0,
            translation=np.zeros(3),
            resolution=(1920, 1080),
        )


def test_camera_center_roundtrip():
    cam = ring_rig(8).cameras[3]
    # projecting a point on the optical axis in front of the center works
    center = cam.center
    forward = cam.rotation[2]
    pix = project(cam, center + 2.0 * forward)
    w, h = cam.resolution
    np.testing.assert_allclose(pix, [w / 2.0, h / 2.0], atol=1e-6)


def test_procrustes_recovers_similarity_transform():
    rng = np.random.default_rng(7)
    for _ in range(20):
        src = rng.normal(size=(12, 3))
        rot = random_rotation(rng)
        scale = rng.uniform(0.5, 2.0)
        t = rng.normal(size=3)
        dst = scale * src @ rot.T + t
        tf, residual = procrustes_align(src, dst)
        assert residual < 1e-10
        np.testing.assert_allclose(tf.apply(src), dst, atol=1e-8)
        np.testing.assert_allclose(tf.rotation @ tf.rotation.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(tf.rotation) > 0


def test_procrustes_reflection_guard():
    """A mirrored target must still produce a proper rotation."""
    rng = np.random.default_rng(8)
    src = rng.normal(size=(10, 3))
    dst = src.copy()
    dst[:, 0] = -dst[:, 0]
    tf, _ = procrustes_align(src, dst)
    assert np.linalg.det(tf.rotation) > 0.99


def test_procrustes_no_scale_keeps_unit_scale():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(8, 3))
    dst = 1.7 * src
    tf, _ = procrustes_align(src, dst, with_scale=False)
    assert tf.scale == 1.0


def test_procrustes_degenerate_input_raises():
    src = np.zeros((5, 3))
    with pytest.raises(DegenerateInputError):
        procrustes_align(src, src + 1.0)


def test_rig_json_roundtrip(tmp_path):
    rig = ring_rig(5)
    path = tmp_path / "rig.json"
    save_rig(path, rig)
    loaded = load_rig(path)
    assert len(loaded) == 5
    for a, b in zip(rig.cameras, loaded.cameras):
        assert a.cam_id == b.cam_id
        np.testing.assert_array_equal(a.intrinsics, b.intrinsics)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert a.resolution == b.resolution
    # second save produces identical bytes
    save_rig(tmp_path / "rig2.json", loaded)
    assert (tmp_path / "rig.json").read_bytes() == (tmp_path / "rig2.json").read_bytes()


def test_rig_dict_rejects_duplicate_ids():
    rig = ring_rig(4)
    data = rig_to_dict(rig)
    data["cameras"][1]["cam_id"] = data["cameras"][0]["cam_id"]
    with pytest.raises(GeometryError):
        rig_from_dict(data)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "out.json"
    atomic_write_text(target, json.dumps({"a": 1}))
    assert json.loads(target.read_text()) == {"a": 1}
    leftovers = [p for p in tmp_path.iterdir() if p.name != "out.json"]
    assert leftovers == []
