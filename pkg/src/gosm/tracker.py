"""Camera tracking by gradient descent on the masked L1 render loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Frame, Pose, SplatMap
from .errors import DegenerateLossError, TrackingFailure
from .rasterizer import LossWeights, masked_l1_loss, render, render_with_gradients

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    iterations: int = 40
    step_size_rotation: float = 1e-3
    step_size_translation: float = 2e-3
    color_weight: float = 0.5
    depth_weight: float = 1.0
    velocity_propagation: bool = True
    visibility_threshold: float = 0.99
    max_halvings: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    min_overlap: float = 0.01

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size_rotation <= 0 or self.step_size_translation <= 0:
            raise ValueError("step sizes must be positive")
        if self.color_weight < 0 or self.depth_weight < 0 or self.color_weight + self.depth_weight == 0:
            raise ValueError("weights must be non-negative and not both zero")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(color=self.color_weight, depth=self.depth_weight,
                           visibility=self.visibility_threshold)


@dataclass
class TrackResult:
    pose: Pose
    final_loss: float
    initial_loss: float
    losses: list[float] = field(default_factory=list)

    def __iter__(self):
        # allows ``pose, loss = track_frame(...)``
        return iter((self.pose, self.final_loss))


def initial_pose_guess(previous_poses: list[Pose], velocity_propagation: bool = True) -> Pose:
    """Starting pose for the next frame.

    With two or more poses and ``velocity_propagation`` the last relative
    motion is applied once more.
    """
    if not previous_poses:
        warnings.warn("empty pose history; starting from identity", RuntimeWarning, stacklevel=2)
        return Pose.identity()
    last = previous_poses[-1]
    if len(previous_poses) < 2 or not velocity_propagation:
        return last
    prev = previous_poses[-2]
    rel = prev.inverse().compose(last)
    return last.compose(rel)


def track_frame(m: SplatMap, frame: Frame, guess: Pose, config: TrackerConfig | None = None) -> TrackResult:
    """Refine ``guess`` so the map rendered from it matches ``frame``.

    Each iteration takes a gradient step in the tangent space with
    separate rotation / translation step sizes, halving the step (up to
    ``max_halvings`` times) until the loss decreases. Iteration stops early
    when no halving improves the loss.
    """
    cfg = config or TrackerConfig()
    weights = cfg.loss_weights
    K = frame.intrinsics
    if len(m) == 0:
        raise TrackingFailure("map is empty", guess)
    # The visibility mask is fixed at the guess so the objective cannot
    # decrease by pushing badly fitting pixels out of the mask.
    visible = (render(m, guess, K).silhouette > weights.visibility) & (frame.depth > 0)
    if visible.mean() < cfg.min_overlap:
        raise TrackingFailure(
            f"frame {frame.index}: only {visible.mean():.2%} of pixels overlap the map", guess)
    try:
        loss, grads = render_with_gradients(m, guess, K, frame, weights, splat_gradients=False,
                                            pixel_mask=visible)
    except DegenerateLossError as exc:
        raise TrackingFailure(f"frame {frame.index}: {exc}", guess) from exc

    scale = np.array([cfg.step_size_rotation] * 3 + [cfg.step_size_translation] * 3)
    pose, initial = guess, loss
    losses = [loss]
    m1 = np.zeros(6)
    m2 = np.zeros(6)
    n_moments = 0
    for it in range(cfg.iterations):
        g = grads.d_pose
        if not np.any(g):
            break
        if cfg.optimizer == "adam":
            n_moments += 1
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            direction = (m1 / (1 - cfg.beta1 ** n_moments)) / (
                np.sqrt(m2 / (1 - cfg.beta2 ** n_moments)) + 1e-12)
        else:
            direction = g
        step = 1.0
        accepted = False
        for h in range(cfg.max_halvings + 1):
            cand = pose.retract(-step * scale * direction)
            try:
                # the full step usually succeeds, so it is evaluated with
                # gradients; shorter trial steps only need the loss
                if h == 0:
                    c_loss, c_grads = render_with_gradients(m, cand, K, frame, weights, splat_gradients=False,
                                                             pixel_mask=visible)
                else:
                    c_loss, c_grads = masked_l1_loss(m, cand, K, frame, weights, pixel_mask=visible), None
            except DegenerateLossError:
                step *= 0.5
                continue
            if c_loss < loss:
                if c_grads is None:
                    c_loss, c_grads = render_with_gradients(m, cand, K, frame, weights, splat_gradients=False,
                                                             pixel_mask=visible)
                pose, loss, grads = cand, c_loss, c_grads
                accepted = True
                break
            step *= 0.5
        losses.append(loss)
        if not accepted:
            if n_moments > 1:
                # momentum pointed uphill; restart from the bare gradient
                m1[:] = 0.0
                m2[:] = 0.0
                n_moments = 0
                continue
            log.debug("frame %d: no descent step at iteration %d", frame.index, it)
            break
    return TrackResult(pose, loss, initial, losses)
