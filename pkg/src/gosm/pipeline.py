"""Reconstruction loop: tracking, keyframe mapping and semantic tagging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Frame, Pose, SplatMap
from .dataset import Manifest
from .errors import ProviderError, TrackingFailure
from .mapper import MapperConfig, densification_mask, densify, refine_map, select_window
from .semantics import EmbeddingTable, SemanticsConfig, assign_object_ids, ingest_embeddings
from .tracker import TrackerConfig, initial_pose_guess, track_frame

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    keyframe_every: int = 5
    tracking_retries: int = 1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    semantics: SemanticsConfig = field(default_factory=SemanticsConfig)


@dataclass
class FrameLog:
    index: int
    keyframe: bool
    tracking_loss: float | None
    added: int = 0
    mapping_loss: float | None = None
    objects: int = 0
    pose: Pose | None = None


def _track(m: SplatMap, frame: Frame, history: list[Pose], cfg: PipelineConfig):
    guesses = [initial_pose_guess(history, cfg.tracker.velocity_propagation)]
    # retry from the last pose without extrapolation
    guesses += [history[-1]] * cfg.tracking_retries
    error = None
    for guess in guesses:
        try:
            return track_frame(m, frame, guess, cfg.tracker)
        except TrackingFailure as exc:
            error = exc
            log.warning("frame %d: %s; retrying", frame.index, exc)
    raise error


def map_keyframe(m: SplatMap, frame: Frame, keyframes: list[Frame], cfg: PipelineConfig,
                 rng: np.random.Generator) -> tuple[int, float]:
    mask = densification_mask(m, frame, cfg.mapper)
    added = densify(m, frame, mask, stride=cfg.mapper.stride, initial_opacity=cfg.mapper.initial_opacity)
    loss = refine_map(m, select_window(keyframes, cfg.mapper, rng), cfg.mapper)
    return added, loss


def reconstruct(manifest: Manifest, config: PipelineConfig | None = None, provider=None,
                embeddings: EmbeddingTable | None = None, progress=None) -> tuple[SplatMap, list[FrameLog]]:
    """Run the full SLAM pass over ``manifest`` and return the map with per-frame logs.

    Frame 0 is anchored at its ground-truth pose when the manifest has one
    (identity otherwise), so map coordinates share the dataset's world frame.
    Every ``keyframe_every``-th frame (and frame 0) is densified, refined over
    a keyframe window, and segmented through ``provider`` when given.
    """
    cfg = config or PipelineConfig()
    rng = np.random.default_rng(cfg.mapper.seed)
    m = SplatMap()
    m.intrinsics = manifest.intrinsics
    history: list[Pose] = []
    keyframes: list[Frame] = []
    logs: list[FrameLog] = []
    for n, entry in enumerate(manifest.frames):
        frame = manifest.load_frame(entry)
        if n == 0:
            frame.pose = entry.gt_pose or Pose.identity()
            loss = None
        else:
            result = _track(m, frame, history, cfg)
            frame.pose = result.pose
            loss = result.final_loss
        history.append(frame.pose)
        record = FrameLog(frame.index, n % cfg.keyframe_every == 0, loss, pose=frame.pose)
        if record.keyframe:
            frame.is_keyframe = True
            keyframes.append(frame)
            m.add_keyframe(frame.index, frame.pose)
            record.added, record.mapping_loss = map_keyframe(m, frame, keyframes, cfg, rng)
            if provider is not None:
                try:
                    records = provider.fetch(frame)
                except ProviderError as exc:
                    log.warning("frame %d: semantic pass skipped: %s", frame.index, exc)
                    records = []
                assign_object_ids(m, frame, records, cfg.semantics)
                if embeddings is not None:
                    new = sorted({r.label for r in records} - set(m.registry.embeddings))
                    ingest_embeddings(m.registry, embeddings, new)
        record.objects = len(m.registry)
        logs.append(record)
        if progress is not None:
            progress(record, m)
    return m, logs
