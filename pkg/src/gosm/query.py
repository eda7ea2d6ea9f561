"""Open-vocabulary object queries against a tagged splat map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import Frame, SplatMap, back_project_pixels, quat_to_rotmat
from .errors import InvalidEmbeddingError, NoMatchError, NoRegistryError, NotFoundError
from .rasterizer import render
from .registry import LabelRegistry, normalize_embedding
from .semantics import label_key

log = logging.getLogger(__name__)


@dataclass
class QueryConfig:
    min_score: float = 0.25
    outlier_low: float = 2.0
    outlier_high: float = 98.0
    box_margin: float = 0.02
    render_silhouette: float = 0.5


@dataclass
class QueryResult:
    matched_label: str
    score: float
    object_ids: frozenset
    splat_indices: NDArray
    bbox_min: NDArray
    bbox_max: NDArray
    keyframe: int
    fallback_used: bool = False
    initial_box: tuple = field(default=(), repr=False)

    @property
    def bbox_3d(self) -> tuple[NDArray, NDArray]:
        return self.bbox_min, self.bbox_max

    @property
    def goal_point(self) -> NDArray:
        return 0.5 * (self.bbox_min + self.bbox_max)


def match_query(query_embedding, registry: LabelRegistry, min_score: float = 0.25) -> tuple[str, float]:
    """Best-scoring registered label by cosine similarity.

    Ties go to the lexicographically smallest label.
    """
    if not registry.embeddings:
        raise NoRegistryError("label registry has no embeddings")
    q = normalize_embedding(query_embedding)
    if registry.dim is not None and len(q) != registry.dim:
        raise InvalidEmbeddingError(f"query has dimension {len(q)}, registry uses {registry.dim}")
    best_label, best = None, -np.inf
    for label in sorted(registry.embeddings):
        s = float(np.dot(q, registry.embeddings[label]))
        if s > best:
            best_label, best = label, s
    if best < min_score:
        raise NoMatchError(f"best match {best_label!r} scores {best:.3f} < {min_score}")
    return best_label, best


def prune_keyframes(label: str, registry: LabelRegistry) -> list[int]:
    """Keyframes where any object with ``label`` was observed, most recent first."""
    seen = set()
    for oid in registry.ids_with_label(label):
        seen.update(registry.entries[oid].keyframes)
    return sorted(seen, reverse=True)


def fallback_keyframes(all_keyframes, pruned) -> list[int]:
    """Keyframes outside ``pruned``, most recent first."""
    skip = set(pruned)
    return sorted((k for k in all_keyframes if k not in skip), reverse=True)


def splat_sigmas(m: SplatMap, idx: NDArray) -> NDArray:
    """Per-axis world standard deviation sqrt(diag Σ) of the given splats."""
    R = quat_to_rotmat(m.quats[idx])
    return np.sqrt(np.einsum("nij,nj->ni", R ** 2, m.scales[idx] ** 2))


def expand_ids(m: SplatMap, ids) -> NDArray:
    """Indices of every splat whose object ID is in ``ids``, ascending."""
    return np.flatnonzero(np.isin(m.object_ids, np.fromiter(ids, dtype=np.int64, count=len(ids))))


def ids_in_box(m: SplatMap, lo: NDArray, hi: NDArray) -> frozenset:
    inside = np.all((m.means >= lo) & (m.means <= hi), axis=1)
    tags = m.object_ids[inside]
    return frozenset(int(t) for t in np.unique(tags[tags >= 0]))


def keyframe_view(m: SplatMap, index: int, silhouette: float = 0.5) -> Frame:
    """Keyframe reconstructed from the map: rendered rgb, and depth where the map is opaque."""
    if m.intrinsics is None:
        raise ValueError("map has no stored intrinsics")
    pose = m.keyframes[index]
    out = render(m, pose, m.intrinsics)
    depth = np.where(out.silhouette > silhouette, out.depth, 0.0)
    return Frame(index, out.rgb, depth, m.intrinsics, pose, is_keyframe=True)


def _box_from_mask(frame: Frame, mask: NDArray, cfg: QueryConfig):
    sel = mask & (frame.depth > 0)
    vs, us = np.nonzero(sel)
    if len(vs) == 0:
        return None
    pts = back_project_pixels(us, vs, frame.depth[vs, us], frame.pose, frame.intrinsics)
    lo_p = np.percentile(pts, cfg.outlier_low, axis=0)
    hi_p = np.percentile(pts, cfg.outlier_high, axis=0)
    keep = np.all((pts >= lo_p) & (pts <= hi_p), axis=1)
    if not keep.any():
        return None
    pts = pts[keep]
    return pts.min(axis=0) - cfg.box_margin, pts.max(axis=0) + cfg.box_margin


def localize(m: SplatMap, query_embedding, provider, config: QueryConfig | None = None,
             query_text: str | None = None, frames: dict[int, Frame] | None = None) -> QueryResult:
    """Locate the object best matching ``query_embedding``.

    Candidate keyframes are those where the matched label was observed,
    newest first, followed by the remaining keyframes. For each, the
    provider is asked to segment ``query_text`` (or the matched label); the
    highest-confidence matching record is lifted to 3D with the keyframe's
    depth, giving a box. Object IDs of splats inside the box form ``C_in``
    and every splat carrying one of them forms ``G_Q``; the reported box
    spans ``G_Q`` centres +/- one standard deviation.

    Keyframe images come from ``frames`` when given, else they are rendered
    from the map at the stored keyframe pose.
    """
    cfg = config or QueryConfig()
    label, score = match_query(query_embedding, m.registry, cfg.min_score)
    prompt = query_text if query_text is not None else label
    wanted = {label_key(label), label_key(prompt)}
    pruned = [k for k in prune_keyframes(label, m.registry) if k in m.keyframes]
    candidates = [(k, False) for k in pruned]
    candidates += [(k, True) for k in fallback_keyframes(m.keyframes, pruned)]

    for k, is_fallback in candidates:
        frame = frames[k] if frames and k in frames else keyframe_view(m, k, cfg.render_silhouette)
        records = [r for r in provider.fetch(frame, prompt) if label_key(r.label) in wanted]
        if not records:
            continue
        rec = max(records, key=lambda r: r.confidence)  # first one wins ties
        box = _box_from_mask(frame, rec.mask, cfg)
        if box is None:
            continue
        c_in = ids_in_box(m, *box)
        if not c_in:
            log.debug("keyframe %d: box for %r contains no tagged splats", k, label)
            continue
        g_q = expand_ids(m, c_in)
        sig = splat_sigmas(m, g_q)
        lo = (m.means[g_q] - sig).min(axis=0)
        hi = (m.means[g_q] + sig).max(axis=0)
        return QueryResult(label, score, c_in, g_q, lo, hi, k, is_fallback, box)
    raise NotFoundError(f"{label!r} matched (score {score:.3f}) but was not found in any keyframe")


def box_corners(lo: NDArray, hi: NDArray) -> NDArray:
    """The 8 corners of an axis-aligned box, x varying fastest."""
    return np.array([[(lo, hi)[i & 1][0], (lo, hi)[(i >> 1) & 1][1], (lo, hi)[(i >> 2) & 1][2]]
                     for i in range(8)])


def export_localization(m: SplatMap, result: QueryResult, path) -> None:
    """ASCII PLY of every splat centre, query splats in red, box corners as comments."""
    n = len(m)
    rgb = np.clip(np.round(m.colors * 255), 0, 255).astype(int)
    # keep pure red reserved for query members
    rgb[np.all(rgb == (255, 0, 0), axis=1), 0] = 254
    rgb[result.splat_indices] = (255, 0, 0)
    lines = ["ply", "format ascii 1.0",
             f"comment query {result.matched_label} score {result.score:.6f}"]
    lines += [f"comment corner {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}" for c in box_corners(result.bbox_min, result.bbox_max)]
    lines += [f"element vertex {n}", "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(m.means, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_points(path) -> tuple[NDArray, NDArray, NDArray]:
    """Points, colors and comment corners of a file written by :func:`export_localization`."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    corners = [[float(x) for x in ln.split()[2:5]] for ln in lines[:end] if ln.startswith("comment corner")]
    rows = np.array([[float(x) for x in ln.split()] for ln in lines[end + 1:] if ln.strip()]).reshape(-1, 6)
    return rows[:, :3], rows[:, 3:].astype(int), np.array(corners)
