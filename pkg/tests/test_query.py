import numpy as np
import pytest

from gosm.core import CameraIntrinsics, Frame, Pose, SplatMap
from gosm.errors import InvalidEmbeddingError, NoMatchError, NoRegistryError, NotFoundError
from gosm.query import (QueryConfig, box_corners, expand_ids, export_localization, fallback_keyframes,
                        ids_in_box, localize, match_query, prune_keyframes, read_ply_points)
from gosm.registry import LabelRegistry, ObjectEntry
from gosm.semantics import SegmentationRecord

K = CameraIntrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)
CUBE_LO, CUBE_HI = np.array([-0.1, -0.1, 1.9]), np.array([0.1, 0.1, 2.1])
SIGMA = 0.01


def _registry(**vecs):
    reg = LabelRegistry()
    for k, v in vecs.items():
        reg.register_embedding(k, v)
    return reg


def test_match_exact():
    assert match_query([1, 0], _registry(chair=[0.6, 0.8], table=[1, 0])) == ("table", 1.0)


def test_match_score_is_cosine():
    label, score = match_query([0.6, 0.8], _registry(table=[1, 0], lamp=[-1, 0]))
    assert label == "table" and score == pytest.approx(0.6, abs=1e-9)


def test_match_hand_computed_scores():
    rng = np.random.default_rng(0)
    for _ in range(50):
        vecs = {f"l{i}": rng.normal(size=5) for i in range(4)}
        q = rng.normal(size=5)
        scores = {k: float(q @ v / np.linalg.norm(q) / np.linalg.norm(v)) for k, v in vecs.items()}
        best = max(scores, key=scores.get)
        if scores[best] < 0.25:
            with pytest.raises(NoMatchError):
                match_query(q, _registry(**vecs))
            continue
        label, score = match_query(q, _registry(**vecs))
        assert label == best and abs(score - scores[best]) < 1e-9


def test_match_ties_break_by_label():
    assert match_query([1, 0], _registry(b=[1, 0], a=[1, 0]))[0] == "a"


def test_match_errors():
    with pytest.raises(NoMatchError):
        match_query([0, 1], _registry(table=[1, 0]))
    with pytest.raises(NoRegistryError):
        match_query([1, 0], LabelRegistry())
    with pytest.raises(InvalidEmbeddingError):
        match_query([0, 0], _registry(table=[1, 0]))
    with pytest.raises(InvalidEmbeddingError):
        match_query([1, 0, 0], _registry(table=[1, 0]))


def test_prune_keyframes():
    reg = LabelRegistry()
    reg.entries[0] = ObjectEntry("cup", [5, 20])
    reg.entries[1] = ObjectEntry("cup", [10])
    reg.entries[2] = ObjectEntry("lamp", [0, 5, 10, 15, 20])
    assert prune_keyframes("cup", reg) == [20, 10, 5]
    assert prune_keyframes("lamp", reg) == [20, 15, 10, 5, 0]
    assert prune_keyframes("sofa", reg) == []
    assert fallback_keyframes([0, 5, 10, 15, 20], [20, 10, 5]) == [15, 0]


def cube_map():
    """12 edge-midpoint splats of a cube (id 0), a tagged wall (id 1) and loose splats."""
    c = 0.5 * (CUBE_LO + CUBE_HI)
    h = 0.5 * (CUBE_HI - CUBE_LO) - SIGMA
    mids = []
    for axis in range(3):
        for s1 in (-1, 1):
            for s2 in (-1, 1):
                p = np.zeros(3)
                o = [a for a in range(3) if a != axis]
                p[o[0]], p[o[1]] = s1 * h[o[0]], s2 * h[o[1]]
                mids.append(c + p)
    m = SplatMap()
    m.extend(mids, np.full((12, 3), SIGMA), np.tile([1.0, 0, 0, 0], (12, 1)), np.tile([0.9, 0.1, 0.1], (12, 1)),
             np.full(12, 0.9), np.zeros(12, dtype=int), np.full(12, 0.9))
    gy, gx = np.mgrid[-1:1:0.1, -1:1:0.1]
    wall = np.c_[gx.ravel(), gy.ravel(), np.full(gx.size, 3.0)]
    m.extend(wall, np.full((len(wall), 3), 0.05), np.tile([1.0, 0, 0, 0], (len(wall), 1)),
             np.full((len(wall), 3), 0.5), np.full(len(wall), 0.9), np.ones(len(wall), dtype=int))
    loose = np.random.default_rng(0).uniform([-1, -1, 2.3], [1, 1, 2.8], (30, 3))
    m.extend(loose, np.full((30, 3), 0.02), np.tile([1.0, 0, 0, 0], (30, 1)), np.full((30, 3), 0.3), np.full(30, 0.5))
    m.next_object_id = 2
    m.registry.entries[0] = ObjectEntry("red_cube", [0])
    m.registry.entries[1] = ObjectEntry("wall", [0, 10])
    m.registry.register_embedding("red_cube", [1, 0, 0])
    m.registry.register_embedding("wall", [0, 1, 0])
    m.intrinsics = K
    m.add_keyframe(0, Pose.identity())
    m.add_keyframe(10, Pose.identity())
    return m


def cube_frame(index=0):
    """Observed keyframe: the cube's front face at z=1.9 in front of the wall."""
    vs, us = np.mgrid[0:48, 0:64]
    x = (us - K.cx) / K.fx
    y = (vs - K.cy) / K.fy
    front = (np.abs(x * 1.9) <= 0.1) & (np.abs(y * 1.9) <= 0.1)
    depth = np.where(front, 1.9, 3.0)
    return Frame(index, np.zeros((48, 64, 3)), depth, K, Pose.identity()), front


class MaskProvider:
    def __init__(self, masks, label="red_cube", confidence=0.9):
        self.masks = masks  # keyframe index -> mask
        self.label = label
        self.confidence = confidence
        self.calls = []

    def fetch(self, frame, prompt=None):
        self.calls.append((frame.index, prompt))
        mask = self.masks.get(frame.index)
        return [] if mask is None else [SegmentationRecord.from_mask(frame.index, self.label, mask, self.confidence)]


def test_localize_cube():
    m = cube_map()
    frame, front = cube_frame()
    res = localize(m, [1, 0, 0], MaskProvider({0: front}), frames={0: frame, 10: frame})
    assert res.matched_label == "red_cube" and res.score == pytest.approx(1.0)
    assert res.object_ids == frozenset({0})
    np.testing.assert_array_equal(res.splat_indices, np.arange(12))
    assert np.abs(res.bbox_min - CUBE_LO).max() < 0.02 and np.abs(res.bbox_max - CUBE_HI).max() < 0.02
    np.testing.assert_allclose(res.goal_point, [0, 0, 2.0], atol=1e-9)
    assert not res.fallback_used and res.keyframe == 0


def test_localize_uses_fallback_keyframe():
    m = cube_map()
    m.registry.entries[0].keyframes = [10]  # pruned list says keyframe 10 only
    frame, front = cube_frame()
    provider = MaskProvider({0: front})
    res = localize(m, [1, 0, 0], provider, frames={0: frame, 10: cube_frame(10)[0]}, query_text="red cube")
    assert res.fallback_used and res.keyframe == 0
    assert [c[0] for c in provider.calls] == [10, 0]
    assert all(c[1] == "red cube" for c in provider.calls)


def test_localize_not_found():
    m = cube_map()
    frame, _ = cube_frame()
    with pytest.raises(NotFoundError):
        localize(m, [1, 0, 0], MaskProvider({}), frames={0: frame, 10: frame})


def test_localize_nonsense_query():
    with pytest.raises(NoMatchError):
        localize(cube_map(), [0, 0, 1], MaskProvider({}))


def test_localize_renders_keyframes_without_frames():
    m = cube_map()
    frame, front = cube_frame()
    provider = MaskProvider({0: front})
    try:
        localize(m, [1, 0, 0], provider)
    except NotFoundError:
        pass
    assert provider.calls and provider.calls[0][0] == 0


def brute_force_gq(m, lo, hi):
    c_in = {int(m.object_ids[k]) for k in range(len(m))
            if m.object_ids[k] >= 0 and all(lo[a] <= m.means[k, a] <= hi[a] for a in range(3))}
    return c_in, {k for k in range(len(m)) if int(m.object_ids[k]) in c_in}


@pytest.mark.parametrize("seed", range(8))
def test_gq_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = SplatMap()
    n = 300
    m.extend(rng.uniform(-1, 1, (n, 3)), np.full((n, 3), 0.02), np.tile([1.0, 0, 0, 0], (n, 1)),
             rng.random((n, 3)), np.full(n, 0.5), rng.integers(-1, 8, n))
    for _ in range(5):
        a, b = rng.uniform(-1, 1, (2, 3))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        c_in, gq = brute_force_gq(m, lo, hi)
        assert ids_in_box(m, lo, hi) == frozenset(c_in)
        assert set(expand_ids(m, ids_in_box(m, lo, hi))) == gq


def test_gq_of_localized_result_matches_brute_force():
    m = cube_map()
    m.object_ids[15:20] = 0  # a few far wall splats share the cube's id
    frame, front = cube_frame()
    res = localize(m, [1, 0, 0], MaskProvider({0: front}), frames={0: frame})
    c_in, gq = brute_force_gq(m, *res.initial_box)
    assert res.object_ids == frozenset(c_in)
    assert set(res.splat_indices) == gq


def test_export_counts(tmp_path):
    m = cube_map()
    frame, front = cube_frame()
    res = localize(m, [1, 0, 0], MaskProvider({0: front}), frames={0: frame})
    path = tmp_path / "q.ply"
    export_localization(m, res, path)
    pts, rgb, corners = read_ply_points(path)
    assert len(pts) == len(m)
    red = np.all(rgb == (255, 0, 0), axis=1)
    assert red.sum() == 12 and np.all(np.flatnonzero(red) == res.splat_indices)
    assert len(corners) == 8
    np.testing.assert_allclose(corners.min(axis=0), res.bbox_min, atol=1e-6)


def test_export_empty_query(tmp_path):
    from gosm.query import QueryResult
    rng = np.random.default_rng(2)
    m = SplatMap()
    m.extend(rng.random((1000, 3)), np.full((1000, 3), 0.01), np.tile([1.0, 0, 0, 0], (1000, 1)),
             np.tile([1.0, 0, 0], (1000, 1)), np.full(1000, 0.5))
    res = QueryResult("x", 1.0, frozenset(), np.zeros(0, dtype=int), np.zeros(3), np.ones(3), 0)
    export_localization(m, res, tmp_path / "e.ply")
    pts, rgb, corners = read_ply_points(tmp_path / "e.ply")
    assert len(pts) == 1000 and not np.all(rgb == (255, 0, 0), axis=1).any()
    assert len(corners) == 8


def test_box_corners():
    c = box_corners(np.zeros(3), np.array([1.0, 2.0, 3.0]))
    assert len({tuple(p) for p in c}) == 8
    np.testing.assert_array_equal(c[7], [1, 2, 3])
