"""RGB-D sequence manifests.

A manifest is a JSON document::

    {"intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
     "depth_scale": 1000.0,
     "frames": [{"index": 0, "rgb": "rgb/0000.png", "depth": "depth/0000.png",
                 "pose": [r11, r12, ..., r33, tx, ty, tz]}, ...]}

Image paths are relative to the manifest. Depth images hold 16-bit integers;
dividing by ``depth_scale`` gives meters, and 0 marks invalid pixels. The
optional ``pose`` is a camera-to-world ground truth, rotation row-major then
translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, Frame, Pose
from .errors import DatasetError


@dataclass
class FrameEntry:
    index: int
    rgb: Path
    depth: Path
    gt_pose: Pose | None = None


@dataclass
class Manifest:
    intrinsics: CameraIntrinsics
    depth_scale: float
    frames: list[FrameEntry]
    path: Path | None = None

    def load_frame(self, entry: FrameEntry) -> Frame:
        return Frame(entry.index, read_rgb(entry.rgb, self.intrinsics), read_depth(entry.depth, self.intrinsics, self.depth_scale),
                     self.intrinsics)


def _check_shape(path: Path, arr: np.ndarray, K: CameraIntrinsics) -> None:
    if arr.shape[:2] != K.shape:
        raise DatasetError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, intrinsics say {K.width}x{K.height}")


def _open(path: Path) -> Image.Image:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        return Image.open(path)
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def read_rgb(path, K: CameraIntrinsics) -> np.ndarray:
    path = Path(path)
    arr = np.asarray(_open(path).convert("RGB"), dtype=float) / 255.0
    _check_shape(path, arr, K)
    return arr


def read_depth(path, K: CameraIntrinsics, depth_scale: float) -> np.ndarray:
    path = Path(path)
    arr = np.asarray(_open(path), dtype=float)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: depth image must be single-channel")
    _check_shape(path, arr, K)
    return arr / depth_scale


def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)).save(path)


def write_depth(path, depth: np.ndarray, depth_scale: float) -> None:
    raw = np.clip(np.round(depth * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    try:
        k = doc["intrinsics"]
        K = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                             int(k["width"]), int(k["height"]))
        scale = float(doc.get("depth_scale", 1000.0))
        frames = []
        for f in doc["frames"]:
            pose = Pose.from_rt12(f["pose"]) if f.get("pose") is not None else None
            frames.append(FrameEntry(int(f["index"]), path.parent / f["rgb"], path.parent / f["depth"], pose))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    if not frames:
        raise DatasetError(f"{path}: manifest lists no frames")
    idx = [f.index for f in frames]
    if idx != sorted(set(idx)):
        raise DatasetError(f"{path}: frame indices must be strictly increasing")
    return Manifest(K, scale, frames, path)


def save_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    K = manifest.intrinsics
    doc = {"intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
           "depth_scale": manifest.depth_scale,
           "frames": [{"index": f.index,
                       "rgb": str(Path(f.rgb).relative_to(path.parent)) if Path(f.rgb).is_absolute() else str(f.rgb),
                       "depth": str(Path(f.depth).relative_to(path.parent)) if Path(f.depth).is_absolute() else str(f.depth),
                       "pose": None if f.gt_pose is None else [float(x) for x in f.gt_pose.to_rt12()]}
                      for f in manifest.frames]}
    path.write_text(json.dumps(doc, indent=1))
