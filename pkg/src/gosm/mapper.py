"""Map growth (densification) and splat parameter refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import Frame, SplatMap, back_project_pixels
from .errors import DegenerateLossError
from .rasterizer import LossWeights, SplatGradients, masked_l1_loss, render, render_with_gradients

_PARAMS = ("means", "scales", "quats", "colors", "opacities")


@dataclass
class MapperConfig:
    # densification
    silhouette_threshold: float = 0.5
    depth_error_factor: float = 5.0
    depth_error_floor: float = 0.01
    stride: int = 2
    initial_opacity: float = 0.5
    # refinement
    iterations: int = 60
    window_recent: int = 5
    window_random: int = 5
    color_weight: float = 0.5
    depth_weight: float = 1.0
    coverage_weight: float = 1.0
    coverage_target: float = 0.995
    lr_means: float = 3e-4
    lr_scales: float = 1.5e-4
    lr_quats: float = 5e-3
    lr_colors: float = 5e-3
    lr_opacities: float = 1e-2
    max_halvings: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(color=self.color_weight, depth=self.depth_weight,
                           visibility=0.0, coverage=self.coverage_weight,
                           coverage_target=self.coverage_target)

    def learning_rates(self) -> dict[str, float]:
        return {p: getattr(self, "lr_" + p) for p in _PARAMS}


def densification_mask(m: SplatMap, frame: Frame, config: MapperConfig | None = None) -> NDArray:
    """Pixels the map does not yet explain.

    A pixel with valid depth is marked when its rendered silhouette is below
    ``silhouette_threshold`` or when the rendered depth lies behind the
    observed depth by more than ``depth_error_factor`` times the median
    absolute depth residual (never less than ``depth_error_floor``).
    """
    cfg = config or MapperConfig()
    if frame.pose is None:
        raise ValueError("frame pose must be set before densification")
    valid = frame.depth > 0
    if len(m) == 0:
        return valid.copy()
    out = render(m, frame.pose, frame.intrinsics)
    low = out.silhouette < cfg.silhouette_threshold
    seen = valid & ~low
    residual = out.depth - frame.depth
    med = float(np.median(np.abs(residual[seen]))) if seen.any() else 0.0
    tol = max(cfg.depth_error_factor * med, cfg.depth_error_floor)
    return valid & (low | (residual > tol))


def densify(m: SplatMap, frame: Frame, mask: NDArray, stride: int = 1,
            initial_opacity: float = 0.5) -> int:
    """Append one splat per masked pixel on the ``stride`` grid; returns the count.

    Each splat is isotropic with radius equal to half the footprint of its
    ``stride`` x ``stride`` pixel cell at the observed depth, i.e.
    ``stride * d / (2 fx)``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if mask.shape != frame.depth.shape:
        raise ValueError(f"mask shape {mask.shape} does not match frame {frame.depth.shape}")
    if frame.pose is None:
        raise ValueError("frame pose must be set before densification")
    sel = mask & (frame.depth > 0)
    grid = np.zeros_like(sel)
    grid[::stride, ::stride] = True
    vs, us = np.nonzero(sel & grid)
    if len(vs) == 0:
        return 0
    d = frame.depth[vs, us]
    K = frame.intrinsics
    centers = back_project_pixels(us, vs, d, frame.pose, K)
    radius = stride * d / (2.0 * K.fx)
    n = len(vs)
    m.extend(centers, np.repeat(radius[:, None], 3, axis=1), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
             frame.rgb[vs, us], np.full(n, initial_opacity))
    return n


def select_window(keyframes: list[Frame], config: MapperConfig, rng: np.random.Generator) -> list[Frame]:
    """Last ``window_recent`` keyframes plus up to ``window_random`` earlier ones."""
    recent = keyframes[-config.window_recent:]
    earlier = keyframes[:-config.window_recent] if len(keyframes) > config.window_recent else []
    if earlier and config.window_random > 0:
        k = min(config.window_random, len(earlier))
        picks = sorted(rng.choice(len(earlier), size=k, replace=False))
        return [earlier[i] for i in picks] + recent
    return recent


def _window_loss(m: SplatMap, frames: list[Frame], weights: LossWeights, grads: bool):
    total = 0.0
    acc = SplatGradients.zeros(len(m)) if grads else None
    used = 0
    for f in frames:
        try:
            if grads:
                loss, g = render_with_gradients(m, f.pose, f.intrinsics, f, weights, pixel_mask=f.depth > 0)
                acc += g.d_splats
            else:
                loss = masked_l1_loss(m, f.pose, f.intrinsics, f, weights, pixel_mask=f.depth > 0)
        except DegenerateLossError:
            continue
        total += loss
        used += 1
    return total, acc, used


def refine_map(m: SplatMap, keyframes: list[Frame], config: MapperConfig | None = None) -> float:
    """Optimise all splat parameters against ``keyframes`` with poses held fixed.

    Steps follow Adam-normalised gradients scaled by the per-parameter
    learning rates, with backtracking halving so the accepted loss never
    increases. Splat invariants are re-established after every step.
    Returns the final summed loss.
    """
    cfg = config or MapperConfig()
    frames = [f for f in keyframes if f.pose is not None]
    if not frames:
        raise ValueError("refine_map needs at least one keyframe with a pose")
    if len(m) == 0:
        return 0.0
    weights = cfg.loss_weights
    lrs = cfg.learning_rates()

    loss, grads, used = _window_loss(m, frames, weights, True)
    if used == 0:
        return 0.0
    m1 = {p: np.zeros_like(getattr(m, p)) for p in _PARAMS}
    m2 = {p: np.zeros_like(getattr(m, p)) for p in _PARAMS}
    n_moments = 0
    b1, b2 = cfg.beta1, cfg.beta2
    for _ in range(cfg.iterations):
        if not any(np.any(getattr(grads, p)) for p in _PARAMS):
            break
        n_moments += 1
        direction = {}
        for p in _PARAMS:
            g = getattr(grads, p)
            m1[p] = b1 * m1[p] + (1 - b1) * g
            m2[p] = b2 * m2[p] + (1 - b2) * g * g
            direction[p] = lrs[p] * (m1[p] / (1 - b1 ** n_moments)) / (
                np.sqrt(m2[p] / (1 - b2 ** n_moments)) + 1e-12)
        saved = {p: getattr(m, p).copy() for p in _PARAMS}
        accepted = False
        # the joint step first, then each parameter group alone: a depth-order
        # swap can make one group's step discontinuous while others still descend
        for groups in [_PARAMS] + [(p,) for p in _PARAMS]:
            if not any(np.any(direction[p]) for p in groups):
                continue
            step = 1.0
            for _ in range(cfg.max_halvings + 1):
                for p in _PARAMS:
                    setattr(m, p, saved[p] - step * direction[p] if p in groups else saved[p].copy())
                m.enforce_invariants()
                c_loss, c_grads, _ = _window_loss(m, frames, weights, True)
                if c_loss < loss:
                    loss, grads = c_loss, c_grads
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted:
            for p in _PARAMS:
                setattr(m, p, saved[p])
            if n_moments > 1:
                for p in _PARAMS:
                    m1[p][:] = 0.0
                    m2[p][:] = 0.0
                n_moments = 0
                continue
            break
    return float(loss)
