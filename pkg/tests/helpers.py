"""Scene builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from gosm.core import CameraIntrinsics, Frame, Pose, SplatMap
from gosm.rasterizer import LossWeights, masked_l1_loss, render

K32 = CameraIntrinsics(30.0, 30.0, 16.0, 16.0, 32, 32)
K64 = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n, z=(1.5, 3.0), spread=0.6, scale=(0.03, 0.2), opacity=(0.05, 0.95)) -> SplatMap:
    m = SplatMap()
    if n:
        m.extend(np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*z, n)],
                 rng.uniform(*scale, (n, 3)), random_quats(rng, n),
                 rng.uniform(0, 1, (n, 3)), rng.uniform(*opacity, n))
    return m


def tracking_scene(rng) -> SplatMap:
    """100 isotropic splats on a gently curved surface about 2.2 m away."""
    gx, gy = np.meshgrid(np.linspace(-1.3, 1.3, 10), np.linspace(-1.0, 1.0, 10))
    x = gx.ravel() + rng.normal(0, 0.02, 100)
    y = gy.ravel() + rng.normal(0, 0.02, 100)
    z = 2.2 + 0.3 * x + 0.2 * y + 0.05 * np.sin(3 * x) * np.cos(2 * y)
    m = SplatMap()
    m.extend(np.c_[x, y, z], np.full((100, 3), 0.19), np.tile([1.0, 0, 0, 0], (100, 1)),
             rng.uniform(0, 1, (100, 3)), np.full(100, 0.99))
    return m


def frame_from_render(m: SplatMap, pose: Pose, K: CameraIntrinsics, index=0, silhouette=0.5) -> Frame:
    """A frame whose depth is valid where the render is at least ``silhouette`` opaque."""
    out = render(m, pose, K)
    return Frame(index, out.rgb, np.where(out.silhouette > silhouette, out.depth, 0.0), K, pose)


def perturbation(rng, degrees=1.0, meters=0.02):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return np.r_[axis * np.deg2rad(degrees), d * meters]


def fd_pose(m, pose, K, target, weights: LossWeights, h=1e-5):
    out = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        out.append((masked_l1_loss(m, pose.retract(e), K, target, weights)
                    - masked_l1_loss(m, pose.retract(-e), K, target, weights)) / (2 * h))
    return np.array(out)


def fd_param(m, name, index, pose, K, target, weights: LossWeights, h=1e-5):
    arr = getattr(m, name)
    old = arr[index]
    arr[index] = old + h
    lp = masked_l1_loss(m, pose, K, target, weights)
    arr[index] = old - h
    lm = masked_l1_loss(m, pose, K, target, weights)
    arr[index] = old
    return (lp - lm) / (2 * h)


def rel_close(analytic, numeric, rel=1e-3, floor=1e-6) -> bool:
    return abs(analytic - numeric) <= max(rel * max(abs(analytic), abs(numeric)), floor)


def wall_map(K: CameraIntrinsics, z=3.0, stride=1) -> SplatMap:
    """One splat per pixel of a fronto-parallel wall, as densify would create it."""
    from gosm.core import back_project_pixels
    vs, us = np.mgrid[0:K.height:stride, 0:K.width:stride]
    us, vs = us.ravel(), vs.ravel()
    pts = back_project_pixels(us, vs, np.full(len(us), z), Pose.identity(), K)
    m = SplatMap()
    r = stride * z / (2 * K.fx)
    m.extend(pts, np.full((len(pts), 3), r), np.tile([1.0, 0, 0, 0], (len(pts), 1)),
             np.full((len(pts), 3), 0.5), np.full(len(pts), 0.5))
    return m


def object_scene(rng, K: CameraIntrinsics):
    """A wall of splats at z=3 with a small object patch in front of it.

    Returns the map and the indices of the object splats.
    """
    m = SplatMap()
    gx, gy = np.meshgrid(np.linspace(-1.2, 1.2, 25), np.linspace(-0.9, 0.9, 19))
    wall = np.c_[gx.ravel(), gy.ravel(), np.full(gx.size, 3.0)]
    m.extend(wall, np.full((len(wall), 3), 0.06), np.tile([1.0, 0, 0, 0], (len(wall), 1)),
             np.full((len(wall), 3), 0.7), np.full(len(wall), 0.95))
    c = np.r_[rng.uniform(-0.3, 0.3, 2), rng.uniform(1.8, 2.2)]
    n = int(rng.integers(5, 9))
    ox, oy = np.meshgrid(np.linspace(-0.1, 0.1, n), np.linspace(-0.1, 0.1, n))
    obj = c + np.c_[ox.ravel(), oy.ravel(), rng.normal(0, 0.005, ox.size)]
    start = len(m)
    m.extend(obj, np.full((len(obj), 3), 0.04), np.tile([1.0, 0, 0, 0], (len(obj), 1)),
             np.tile([0.9, 0.1, 0.1], (len(obj), 1)), np.full(len(obj), 0.95))
    return m, np.arange(start, len(m))


def object_mask(m: SplatMap, obj_idx, pose: Pose, K: CameraIntrinsics, threshold=0.5):
    only = SplatMap()
    only.extend(m.means[obj_idx], m.scales[obj_idx], m.quats[obj_idx], m.colors[obj_idx], m.opacities[obj_idx])
    return render(only, pose, K).silhouette > threshold


def wall_with_gap(spacing=0.05, gap=(0.2, 1.0)):
    """Obstacle centres of a wall in the plane x=0 with a full-height slot."""
    ys = np.arange(-1.5, 1.5 + 1e-9, spacing)
    zs = np.arange(0.0, 1.0 + 1e-9, spacing)
    gy, gz = np.meshgrid(ys, zs)
    pts = np.c_[np.zeros(gy.size), gy.ravel(), gz.ravel()]
    keep = (pts[:, 1] < gap[0]) | (pts[:, 1] > gap[1])
    return pts[keep]


def dense_clearance_ok(waypoints, obstacles, radius, step=0.002) -> bool:
    """Independent check: sample the polyline finely and query every obstacle."""
    from scipy.spatial import cKDTree
    tree = cKDTree(obstacles)
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        k = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
        pts = a + np.linspace(0, 1, k)[:, None] * (b - a)
        if tree.query(pts)[0].min() <= radius:
            return False
    return True
