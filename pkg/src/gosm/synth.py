"""Synthetic RGB-D room scenes with labelled primitive objects.

The generator ray-casts a textured room (floor, walls, ceiling; world z up)
containing axis-aligned boxes and spheres, along a camera arc. It writes
everything the pipeline and its tests consume: images, a manifest with
ground-truth poses, per-frame segmentation fixtures, an embedding table,
ground-truth 3D boxes and a query list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import CameraIntrinsics, Pose
from .dataset import FrameEntry, Manifest, save_manifest, write_depth, write_rgb
from .evaluation import GroundTruthBox, save_ground_truth
from .semantics import EmbeddingTable, SegmentationRecord, fixture_name, records_to_json


@dataclass
class Primitive:
    label: str
    kind: str  # "box" or "sphere"
    color: tuple
    center: tuple
    size: tuple  # box half-extents, or (radius,) for a sphere

    @property
    def aabb(self) -> tuple[NDArray, NDArray]:
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.size * 3 if self.kind == "sphere" else self.size, dtype=float)[:3]
        return c - h, c + h


@dataclass
class Room:
    half_x: float = 2.0
    half_y: float = 2.0
    height: float = 2.4
    objects: list[Primitive] = field(default_factory=list)


def default_room() -> Room:
    return Room(objects=[
        Primitive("red_cube", "box", (0.85, 0.15, 0.12), (-0.45, 0.10, 0.15), (0.15, 0.15, 0.15)),
        Primitive("blue_box", "box", (0.15, 0.25, 0.85), (0.35, 0.35, 0.10), (0.20, 0.12, 0.10)),
        Primitive("green_ball", "sphere", (0.15, 0.75, 0.20), (0.05, -0.35, 0.15), (0.15,)),
    ])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (camera y points down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def arc_trajectory(n: int, radius: float = 1.3, height: float = 0.7, start_deg: float = -104.0,
                   sweep_deg: float = 28.0, target=(0.0, 0.0, 0.15)) -> list[Pose]:
    angles = np.deg2rad(start_deg + sweep_deg * np.arange(n) / max(n - 1, 1))
    return [look_at((radius * np.cos(a), radius * np.sin(a), height), target) for a in angles]


def _texture(points: NDArray, surface: NDArray) -> NDArray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    out = np.zeros((len(points), 3))
    base = {0: (0.55, 0.50, 0.42), 1: (0.80, 0.78, 0.72), 2: (0.62, 0.66, 0.72),
            3: (0.70, 0.62, 0.60), 4: (0.60, 0.70, 0.62), 5: (0.72, 0.70, 0.60)}
    for s, col in base.items():
        sel = surface == s
        if not sel.any():
            continue
        if s in (0, 1):  # floor / ceiling
            a, b = x[sel], y[sel]
        elif s in (2, 3):  # walls at +-y
            a, b = x[sel], z[sel]
        else:  # walls at +-x
            a, b = y[sel], z[sel]
        pattern = 0.5 * np.sin(2 * np.pi * a / 0.7) * np.cos(2 * np.pi * b / 0.55) + 0.5 * np.sin(2 * np.pi * (a + b) / 1.3)
        out[sel] = np.clip(np.asarray(col) * (1.0 + 0.25 * pattern)[:, None], 0, 1)
    return out


def raycast(room: Room, pose: Pose, K: CameraIntrinsics):
    """Render ``room``; returns ``(rgb, depth, object_index)`` with -1 for the room shell."""
    H, W = K.shape
    vs, us = np.mgrid[0:H, 0:W]
    d_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones((H, W))], -1).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T
    o = pose.translation
    n = len(dirs)
    t_best = np.full(n, np.inf)
    hit_obj = np.full(n, -1)
    hit_surface = np.full(n, -1)
    normals = np.zeros((n, 3))

    # room shell, seen from inside
    planes = [(2, 0.0, 0), (2, room.height, 1), (1, -room.half_y, 2), (1, room.half_y, 3),
              (0, -room.half_x, 4), (0, room.half_x, 5)]
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, value, sid in planes:
            t = (value - o[axis]) / dirs[:, axis]
            ok = (t > 1e-6) & (t < t_best)
            t_best[ok] = t[ok]
            hit_surface[ok] = sid
            hit_obj[ok] = -1
        for k, obj in enumerate(room.objects):
            if obj.kind == "sphere":
                c = np.asarray(obj.center)
                r = obj.size[0]
                oc = o - c
                b = dirs @ oc
                a = np.sum(dirs * dirs, axis=1)
                disc = b * b - a * (oc @ oc - r * r)
                t = (-b - np.sqrt(np.maximum(disc, 0))) / a
                ok = (disc > 0) & (t > 1e-6) & (t < t_best)
                t_best[ok] = t[ok]
                hit_obj[ok] = k
                p = o + t[ok, None] * dirs[ok]
                normals[ok] = (p - c) / r
            else:
                lo, hi = obj.aabb
                t1 = (lo - o) / dirs
                t2 = (hi - o) / dirs
                tmin = np.minimum(t1, t2)
                tn = tmin.max(axis=1)
                tf = np.maximum(t1, t2).min(axis=1)
                ok = (tn <= tf) & (tn > 1e-6) & (tn < t_best)
                t_best[ok] = tn[ok]
                hit_obj[ok] = k
                ax = np.argmax(tmin[ok], axis=1)
                nrm = np.zeros((ok.sum(), 3))
                nrm[np.arange(len(ax)), ax] = -np.sign(dirs[ok][np.arange(len(ax)), ax])
                normals[ok] = nrm

    hit = np.isfinite(t_best)
    pts = o + np.where(hit, t_best, 0.0)[:, None] * dirs
    rgb = _texture(pts, np.where(hit_obj < 0, hit_surface, -1))
    light = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for k, obj in enumerate(room.objects):
        sel = hit_obj == k
        shade = 0.65 + 0.35 * np.clip(normals[sel] @ light, 0, 1)
        rgb[sel] = np.clip(np.asarray(obj.color) * shade[:, None], 0, 1)
    depth = np.where(hit, t_best, 0.0)  # camera z equals t because d_cam has unit z
    return rgb.reshape(H, W, 3), depth.reshape(H, W), hit_obj.reshape(H, W)


def embedding_table(labels: list[str], dim: int = 8, seed: int = 7) -> EmbeddingTable:
    """Mutually orthogonal unit embeddings; ``xyzzy`` is orthogonal to every label."""
    names = list(labels) + ["xyzzy"]
    if len(names) > dim:
        raise ValueError("embedding dimension too small for the label set")
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))
    return EmbeddingTable(dim, {name: q[:, i] for i, name in enumerate(names)})


@dataclass
class SynthConfig:
    frames: int = 20
    width: int = 80
    height: int = 60
    focal: float = 100.0
    depth_scale: float = 1000.0
    confidence: float = 0.9
    seed: int = 7
    orbit_radius: float = 1.3
    camera_height: float = 0.7
    start_deg: float = -104.0
    sweep_deg: float = 28.0


def generate(out_dir, config: SynthConfig | None = None, room: Room | None = None) -> Path:
    """Write a synthetic dataset into ``out_dir``; returns the manifest path."""
    cfg = config or SynthConfig()
    room = room or default_room()
    out = Path(out_dir)
    for sub in ("rgb", "depth", "fixtures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    K = CameraIntrinsics(cfg.focal, cfg.focal, (cfg.width - 1) / 2, (cfg.height - 1) / 2, cfg.width, cfg.height)
    entries = []
    for i, pose in enumerate(arc_trajectory(cfg.frames, cfg.orbit_radius, cfg.camera_height,
                                                       cfg.start_deg, cfg.sweep_deg)):
        rgb, depth, obj = raycast(room, pose, K)
        rgb_name, depth_name = f"rgb/{i:04d}.png", f"depth/{i:04d}.png"
        write_rgb(out / rgb_name, rgb)
        write_depth(out / depth_name, depth, cfg.depth_scale)
        records = [SegmentationRecord.from_mask(i, o.label, obj == k, cfg.confidence)
                   for k, o in enumerate(room.objects) if np.any(obj == k)]
        (out / "fixtures" / fixture_name(i)).write_text(json.dumps(records_to_json(i, cfg.height, cfg.width, records)))
        entries.append(FrameEntry(i, Path(rgb_name), Path(depth_name), pose))
    manifest = out / "manifest.json"
    save_manifest(manifest, Manifest(K, cfg.depth_scale, entries))
    labels = [o.label for o in room.objects]
    embedding_table(labels, seed=cfg.seed).save(out / "embeddings.txt")
    save_ground_truth(out / "gt_boxes.txt", [GroundTruthBox(o.label, *o.aabb) for o in room.objects])
    (out / "queries.txt").write_text("".join(f"{label}\n" for label in labels))
    return manifest
