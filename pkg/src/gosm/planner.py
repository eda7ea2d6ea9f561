"""Probabilistic-roadmap path planning among splat centres."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .core import SplatMap
from .errors import BlockedEndpointError, PlanningInfeasibleError, UnreachableError


@dataclass(frozen=True)
class PlannerConfig:
    sample_count: int = 2000
    connect_radius: float = 0.75
    robot_radius: float = 0.25
    edge_step: float = 0.05
    seed: int = 42
    bounds_inflation: float = 0.10

    def __post_init__(self):
        if self.sample_count < 0 or self.connect_radius <= 0 or self.robot_radius < 0 or self.edge_step <= 0:
            raise ValueError("invalid planner parameters")


class ObstacleField:
    """Nearest-obstacle queries over a point cloud with a spherical robot."""

    def __init__(self, centers: NDArray, robot_radius: float):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self.radius = float(robot_radius)
        self.tree = cKDTree(self.centers) if len(self.centers) else None

    def clearance(self, points: NDArray) -> NDArray:
        """Distance from each point to its nearest obstacle centre (inf if none)."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.tree is None:
            return np.full(len(points), np.inf)
        return self.tree.query(points)[0]

    def free(self, points: NDArray) -> NDArray:
        return self.clearance(points) > self.radius

    def segments_free(self, a: NDArray, b: NDArray, max_depth: int = 24) -> NDArray:
        """Whether each segment a[i]-b[i] keeps the robot clear of all obstacles.

        Endpoints must already be free. A segment of length L whose endpoint
        clearances are da, db is free when L < da + db - 2r (the two
        clearance balls cover it); otherwise it is split at its midpoint,
        which is checked directly. Segments unresolved after ``max_depth``
        splits count as blocked.
        """
        a = np.asarray(a, dtype=float).reshape(-1, 3)
        b = np.asarray(b, dtype=float).reshape(-1, 3)
        ok = np.ones(len(a), dtype=bool)
        if self.tree is None or len(a) == 0:
            return ok
        owner = np.arange(len(a))
        da, db = self.clearance(a), self.clearance(b)
        for _ in range(max_depth):
            length = np.linalg.norm(b - a, axis=1)
            pending = ok[owner] & (length >= da + db - 2 * self.radius)
            if not pending.any():
                return ok
            owner, a, b, da, db = owner[pending], a[pending], b[pending], da[pending], db[pending]
            mid = 0.5 * (a + b)
            dm = self.clearance(mid)
            blocked = dm <= self.radius
            ok[owner[blocked]] = False
            keep = ~blocked
            owner, a, b, da, db, mid, dm = owner[keep], a[keep], b[keep], da[keep], db[keep], mid[keep], dm[keep]
            owner = np.concatenate([owner, owner])
            a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
            da, db = np.concatenate([da, dm]), np.concatenate([dm, db])
        length = np.linalg.norm(b - a, axis=1)
        ok[owner[length >= da + db - 2 * self.radius]] = False
        return ok


def collision_free(point, obstacle_centers, robot_radius: float) -> bool:
    """True iff the nearest obstacle centre is farther than ``robot_radius``."""
    centers = np.asarray(obstacle_centers, dtype=float).reshape(-1, 3)
    if len(centers) == 0:
        return True
    return bool(np.min(np.linalg.norm(centers - np.asarray(point, dtype=float), axis=1)) > robot_radius)


@dataclass
class Roadmap:
    nodes: NDArray
    edges: NDArray
    lengths: NDArray
    config: PlannerConfig

    START = 0
    GOAL = 1


def sampling_box(obstacles: NDArray, start: NDArray, goal: NDArray, cfg: PlannerConfig):
    pts = np.vstack([obstacles.reshape(-1, 3), start, goal])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.5 * cfg.bounds_inflation * (hi - lo)
    # a flat dimension still gets room for the robot to move around
    pad = np.maximum(pad, cfg.robot_radius)
    return lo - pad, hi + pad


def build_roadmap(obstacles, start, goal, config: PlannerConfig | None = None) -> Roadmap:
    """PRM over uniform samples in the inflated bounds of obstacles, start and goal.

    ``obstacles`` is a :class:`SplatMap` (its centres are used) or an N x 3
    array. Node 0 is the start and node 1 the goal. Samples are the free
    prefix of one seeded uniform stream, so growing ``sample_count`` only
    adds nodes.
    """
    cfg = config or PlannerConfig()
    centers = obstacles.means if isinstance(obstacles, SplatMap) else np.asarray(obstacles, dtype=float).reshape(-1, 3)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    field = ObstacleField(centers, cfg.robot_radius)
    for which, p in (("start", start), ("goal", goal)):
        if not field.free(p)[0]:
            raise BlockedEndpointError(which, p)

    lo, hi = sampling_box(centers, start, goal, cfg)
    rng = np.random.default_rng(cfg.seed)
    samples = lo + rng.random((cfg.sample_count, 3)) * (hi - lo)
    samples = samples[field.free(samples)]
    if cfg.sample_count > 0 and len(samples) == 0:
        raise PlanningInfeasibleError(f"none of {cfg.sample_count} samples is collision-free")
    nodes = np.vstack([start, goal, samples])

    pairs = cKDTree(nodes).query_pairs(cfg.connect_radius, output_type="ndarray")
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        pairs = pairs[field.segments_free(nodes[pairs[:, 0]], nodes[pairs[:, 1]])]
    pairs = pairs.reshape(-1, 2)
    lengths = np.linalg.norm(nodes[pairs[:, 0]] - nodes[pairs[:, 1]], axis=1)
    return Roadmap(nodes, pairs, lengths, cfg)


def shortest_path(roadmap: Roadmap) -> tuple[NDArray, float]:
    """Minimum-length start-to-goal waypoint sequence and its length."""
    n = len(roadmap.nodes)
    e = roadmap.edges
    # zero-length edges would vanish from a sparse matrix; keep them tiny instead
    w = np.maximum(roadmap.lengths, 1e-12)
    graph = coo_matrix((np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                               np.concatenate([e[:, 1], e[:, 0]]))), shape=(n, n)).tocsr()
    dist, pred = dijkstra(graph, directed=True, indices=Roadmap.START, return_predecessors=True)
    if not np.isfinite(dist[Roadmap.GOAL]):
        raise UnreachableError("start and goal are in disconnected roadmap components")
    path = [Roadmap.GOAL]
    while path[-1] != Roadmap.START:
        path.append(int(pred[path[-1]]))
    path.reverse()
    pts = roadmap.nodes[path]
    return pts, float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def plan(obstacles, start, goal, config: PlannerConfig | None = None) -> tuple[NDArray, float]:
    return shortest_path(build_roadmap(obstacles, start, goal, config))


def nearest_free_point(obstacles, point, robot_radius: float, step: float = 0.02,
                       max_distance: float = 2.0, directions: int = 256) -> NDArray:
    """Closest collision-free point to ``point`` on a shell search.

    Shells of radius step, 2*step, ... are probed along a fixed Fibonacci
    set of directions; the first free probe (ties broken by direction
    order) is returned, or ``point`` itself when it is already free.
    """
    centers = obstacles.means if isinstance(obstacles, SplatMap) else obstacles
    field = ObstacleField(centers, robot_radius)
    point = np.asarray(point, dtype=float)
    if field.free(point)[0]:
        return point
    k = np.arange(directions) + 0.5
    polar = np.arccos(1 - 2 * k / directions)
    azim = np.pi * (1 + 5 ** 0.5) * k
    dirs = np.column_stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)])
    for r in np.arange(1, int(np.ceil(max_distance / step)) + 1) * step:
        probes = point + r * dirs
        ok = np.flatnonzero(field.free(probes))
        if len(ok):
            return probes[ok[0]]
    raise BlockedEndpointError("goal", point)


def densify_path(waypoints: NDArray, step: float) -> NDArray:
    """Points along the polyline at spacing no larger than ``step`` (vertices included)."""
    waypoints = np.asarray(waypoints, dtype=float)
    out = [waypoints[:1]]
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        k = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = np.arange(1, k + 1)[:, None] / k
        out.append(a + t * (b - a))
    return np.vstack(out)


def path_collision_free(waypoints: NDArray, obstacles, robot_radius: float, step: float) -> bool:
    centers = obstacles.means if isinstance(obstacles, SplatMap) else obstacles
    return bool(ObstacleField(centers, robot_radius).free(densify_path(waypoints, step)).all())


def write_waypoints(path, waypoints: NDArray) -> None:
    Path(path).write_text("".join(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n" for p in np.asarray(waypoints)))


def read_waypoints(path) -> NDArray:
    return np.loadtxt(path, ndmin=2)
