import numpy as np
import pytest

from gosm.core import CameraIntrinsics, Frame, Pose, SplatMap
from gosm.mapper import MapperConfig, densification_mask, densify, refine_map, select_window
from gosm.rasterizer import render
from gosm.synth import arc_trajectory, default_room, raycast

from helpers import K32, K64, frame_from_render, random_scene

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def _wall_frame(K, z=3.0, index=0):
    return Frame(index, np.full((K.height, K.width, 3), 0.5), np.full((K.height, K.width), z), K, Pose.identity())


def test_empty_map_marks_all_valid_pixels():
    f = _wall_frame(K32)
    f.depth[:4] = 0.0
    np.testing.assert_array_equal(densification_mask(SplatMap(), f), f.depth > 0)


def test_mapped_wall_needs_nothing():
    f = _wall_frame(K32)
    m = SplatMap()
    densify(m, f, densification_mask(m, f))
    assert densification_mask(m, f).mean() < 0.01


def test_new_occluder_is_marked():
    wall = _wall_frame(K32)
    m = SplatMap()
    densify(m, wall, densification_mask(m, wall))
    f = _wall_frame(K32, index=1)
    block = np.zeros((32, 32), bool)
    block[10:20, 10:20] = True  # about 10% of the image
    f.depth[block] = 1.0
    mask = densification_mask(m, f)
    np.testing.assert_array_equal(mask, block)


def test_densify_empty_mask():
    m = random_scene(np.random.default_rng(0), 5)
    before = m.means.copy()
    assert densify(m, _wall_frame(K32), np.zeros((32, 32), bool)) == 0
    np.testing.assert_array_equal(m.means, before)


def test_densify_single_pixel():
    f = _wall_frame(K100, z=2.0)
    mask = np.zeros((101, 101), bool)
    mask[50, 50] = True
    m = SplatMap()
    assert densify(m, f, mask) == 1
    np.testing.assert_allclose(m.means[0], [0, 0, 2])
    np.testing.assert_allclose(m.scales[0], [0.01] * 3)
    np.testing.assert_allclose(m.colors[0], [0.5] * 3)


def test_densify_counts():
    f = _wall_frame(K32)
    m = SplatMap()
    assert densify(m, f, np.ones((32, 32), bool)) == 1024
    assert densify(SplatMap(), f, np.ones((32, 32), bool), stride=2) == 256
    with pytest.raises(ValueError):
        densify(m, f, np.ones((16, 16), bool))


def test_window_selection():
    frames = [_wall_frame(K32, index=i) for i in range(12)]
    cfg = MapperConfig()
    w1 = select_window(frames, cfg, np.random.default_rng(3))
    w2 = select_window(frames, cfg, np.random.default_rng(3))
    assert [f.index for f in w1] == [f.index for f in w2]
    assert [f.index for f in w1[-5:]] == [7, 8, 9, 10, 11]
    assert len(w1) == 10 and len({f.index for f in w1}) == 10
    assert [f.index for f in select_window(frames[:3], cfg, np.random.default_rng(0))] == [0, 1, 2]


def test_refine_fixed_point():
    m = random_scene(np.random.default_rng(4), 30, opacity=(0.6, 0.95))
    frames = [frame_from_render(m, Pose.identity(), K32, silhouette=0.9)]
    before = {p: getattr(m, p).copy() for p in ("means", "scales", "quats", "colors", "opacities")}
    loss = refine_map(m, frames, MapperConfig(coverage_target=0.9))
    assert loss == 0.0
    for p, v in before.items():
        assert np.abs(getattr(m, p) - v).max() < 1e-8


def test_refine_single_splat_color():
    m = SplatMap()
    m.extend([[0, 0, 2]], [[0.3] * 3], [[1, 0, 0, 0]], [[0.2, 0.4, 0.6]], [0.999])
    frame = frame_from_render(m, Pose.identity(), K64, silhouette=0.9)
    for start in ([0.7, 0.1, 0.3], [0.0, 1.0, 0.0]):
        m2 = m.copy()
        m2.colors[:] = start
        refine_map(m2, [frame], MapperConfig(iterations=200, coverage_target=0.9))
        assert np.abs(m2.colors - m.colors).max() < 0.01


def test_refine_recovers_perturbed_centers():
    rng = np.random.default_rng(8)
    truth = random_scene(rng, 50, opacity=(0.5, 0.95))
    poses = [Pose.identity(), Pose.identity().retract([0, 0.05, 0, -0.1, 0, 0])]
    frames = [frame_from_render(truth, p, K32, index=i) for i, p in enumerate(poses)]
    m = truth.copy()
    m.means += rng.normal(0, 0.01, m.means.shape)
    cfg = MapperConfig(coverage_weight=0.0)
    initial = sum(_l1(m, f, cfg) for f in frames)
    final = refine_map(m, frames, cfg)
    assert final < 0.2 * initial


def _l1(m, frame, cfg):
    from gosm.rasterizer import masked_l1_loss
    return masked_l1_loss(m, frame.pose, frame.intrinsics, frame, cfg.loss_weights, pixel_mask=frame.depth > 0)


def test_refine_keeps_invariants():
    rng = np.random.default_rng(2)
    m = random_scene(rng, 20)
    target = random_scene(rng, 20)
    frame = frame_from_render(target, Pose.identity(), K32)
    refine_map(m, [frame], MapperConfig(iterations=10))
    np.testing.assert_allclose(np.linalg.norm(m.quats, axis=1), 1.0)
    assert np.all(m.scales > 0) and np.all((m.opacities > 0) & (m.opacities < 1))
    assert np.all((m.colors >= 0) & (m.colors <= 1))


def test_refine_is_deterministic():
    rng = np.random.default_rng(6)
    base = random_scene(rng, 20)
    frame = frame_from_render(random_scene(rng, 20), Pose.identity(), K32)
    a, b = base.copy(), base.copy()
    refine_map(a, [frame], MapperConfig(iterations=5))
    refine_map(b, [frame], MapperConfig(iterations=5))
    np.testing.assert_array_equal(a.means, b.means)


def test_densify_then_refine_is_idempotent():
    K = CameraIntrinsics(50.0, 50.0, 19.5, 14.5, 40, 30)
    pose = arc_trajectory(1)[0]
    rgb, depth, _ = raycast(default_room(), pose, K)
    frame = Frame(0, rgb, depth, K, pose)
    m = SplatMap()
    cfg = MapperConfig(stride=1)
    first = densification_mask(m, frame, cfg)
    densify(m, frame, first, stride=1)
    refine_map(m, [frame], cfg)
    again = densification_mask(m, frame, cfg)
    assert (again & first).sum() < 0.05 * first.sum()


def test_rendered_depth_of_fresh_wall_is_exact():
    f = _wall_frame(K32)
    m = SplatMap()
    densify(m, f, np.ones((32, 32), bool))
    out = render(m, f.pose, K32)
    np.testing.assert_allclose(out.depth, 3.0, rtol=1e-9)
