import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gosm.core import (CameraIntrinsics, Pose, Splat, SplatMap, back_project, evaluate_gaussian,
                       project, quat_to_rotmat, rotmat_to_quat, so3_exp, translation_pose)
from gosm.errors import InvalidDepthError, MapFormatError, NonProjectableError
from gosm.mapfile import decode_map, encode_map, load_map, save_map
from gosm.registry import ObjectEntry

from helpers import random_scene

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def test_project_optical_axis():
    assert project([0, 0, 2], Pose.identity(), K100) == pytest.approx((50, 50, 2))


def test_project_offset_point():
    assert project([2, 0, 2], Pose.identity(), K100) == pytest.approx((150, 50, 2))


def test_project_behind_camera():
    with pytest.raises(NonProjectableError):
        project([0, 0, -1], Pose.identity(), K100)


@pytest.mark.parametrize("u,v,pose,expected", [
    (50, 50, Pose.identity(), (0, 0, 2)),
    (150, 50, Pose.identity(), (2, 0, 2)),
    (50, 50, translation_pose(1, 0, 0), (1, 0, 2)),
])
def test_back_project(u, v, pose, expected):
    assert back_project(u, v, 2.0, pose, K100) == pytest.approx(expected)


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_back_project_rejects_bad_depth(d):
    with pytest.raises(InvalidDepthError):
        back_project(10, 10, d, Pose.identity(), K100)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.1, 20),
       st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_project_inverts_back_project(u, v, d, xi):
    pose = Pose.identity().retract(np.array(xi))
    p = back_project(u, v, d, pose, K100)
    assert project(p, pose, K100) == pytest.approx((u, v, d), rel=1e-9, abs=1e-7)


def test_gaussian_at_mean():
    s = Splat([1, 2, 3], [0.3, 0.2, 0.1], [1, 0, 0, 0], [0.2, 0.4, 0.6], 0.5)
    np.testing.assert_allclose(evaluate_gaussian(s, [1, 2, 3]), [0.2, 0.4, 0.6])


def test_gaussian_unit_covariance():
    s = Splat([0, 0, 0], [1, 1, 1], [1, 0, 0, 0], [1, 1, 1], 0.5)
    np.testing.assert_allclose(evaluate_gaussian(s, [1, 1, 0]), np.exp(-1.0) * np.ones(3))


def test_gaussian_anisotropic():
    s = Splat([0, 0, 0], [2, 1, 1], [1, 0, 0, 0], [0.5, 0.5, 0.5], 0.5)
    np.testing.assert_allclose(evaluate_gaussian(s, [2, 0, 0]), 0.5 * np.exp(-0.5) * np.ones(3))


def test_gaussian_respects_rotation():
    # a 90 degree turn about z swaps the long axis onto y
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    s = Splat([0, 0, 0], [2, 1, 1], q, [1, 1, 1], 0.5)
    np.testing.assert_allclose(evaluate_gaussian(s, [0, 2, 0]), np.exp(-0.5) * np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_roundtrip(q):
    q = np.array(q) / np.linalg.norm(q)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    q2 = rotmat_to_quat(R)
    assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_inverse_and_retract():
    pose = Pose(so3_exp([0.1, -0.2, 0.3]), [1, 2, 3])
    np.testing.assert_allclose(pose.compose(pose.inverse()).matrix(), np.eye(4), atol=1e-12)
    moved = pose.retract([0, 0, 0, 0.5, 0, 0])
    np.testing.assert_allclose(moved.translation, [1.5, 2, 3])
    np.testing.assert_allclose(Pose.from_rt12(pose.to_rt12()).matrix(), pose.matrix(), atol=1e-12)


def test_splat_validation():
    with pytest.raises(ValueError):
        Splat([0, 0, 0], [0.1, -0.1, 0.1], [1, 0, 0, 0], [0, 0, 0], 0.5)
    with pytest.raises(ValueError):
        Splat([0, 0, 0], [0.1] * 3, [1, 0, 0, 0], [0, 0, 0], 1.5)


# --- persistence ---------------------------------------------------------

def _assert_maps_equal(a: SplatMap, b: SplatMap):
    for name in ("means", "scales", "quats", "colors", "opacities", "object_ids", "tag_confidence"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.keyframes.keys() == b.keyframes.keys()
    for k in a.keyframes:
        np.testing.assert_array_equal(a.keyframes[k].matrix(), b.keyframes[k].matrix())
    assert a.next_object_id == b.next_object_id
    assert a.intrinsics == b.intrinsics
    assert a.registry.entries == b.registry.entries
    assert a.registry.embeddings.keys() == b.registry.embeddings.keys()


def test_empty_map_is_header_only(tmp_path):
    path = tmp_path / "empty.gsm"
    save_map(SplatMap(), path)
    assert path.stat().st_size == 16
    assert len(load_map(path)) == 0


def test_single_splat_roundtrip(tmp_path):
    m = SplatMap()
    m.append(Splat([0.1, 0.2, 0.3], [0.01, 0.02, 0.03], [0.5, 0.5, 0.5, 0.5], [0.1, 0.6, 0.9], 0.7, 4))
    path = tmp_path / "one.gsm"
    save_map(m, path)
    back = load_map(path)
    assert len(back) == 1
    s, t = m[0], back[0]
    for name in ("center", "scale", "rotation", "color"):
        np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
    assert (s.opacity, s.object_id) == (t.opacity, t.object_id)


def test_full_map_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    m = random_scene(rng, 40)
    m.object_ids[:10] = 0
    m.object_ids[10:15] = 1
    m.tag_confidence[:15] = 0.9
    m.next_object_id = 2
    m.registry.entries[0] = ObjectEntry("mug", [0, 5])
    m.registry.entries[1] = ObjectEntry("lamp", [5])
    m.registry.register_embedding("mug", [1.0, 2.0, 2.0])
    m.registry.register_embedding("lamp", [0.0, 1.0, 0.0])
    m.intrinsics = K100
    m.add_keyframe(0, Pose.identity())
    m.add_keyframe(5, Pose(so3_exp([0.01, 0.2, -0.1]), [0.3, 0.1, 0.0]))
    path = tmp_path / "full.gsm"
    save_map(m, path)
    back = load_map(path)
    _assert_maps_equal(m, back)
    for label in m.registry.embeddings:
        np.testing.assert_array_equal(m.registry.embeddings[label], back.registry.embeddings[label])
    assert encode_map(back) == path.read_bytes()


def test_corrupted_magic(tmp_path):
    data = bytearray(encode_map(random_scene(np.random.default_rng(0), 2)))
    data[0:4] = b"XXXX"
    with pytest.raises(MapFormatError, match="offset 0"):
        decode_map(bytes(data))


def test_unsupported_version():
    data = bytearray(encode_map(SplatMap()))
    data[4] = 99
    with pytest.raises(MapFormatError, match="version"):
        decode_map(bytes(data))


def test_truncated_record_names_offset():
    data = encode_map(random_scene(np.random.default_rng(0), 3))
    with pytest.raises(MapFormatError, match="offset"):
        decode_map(data[:16 + 100])
