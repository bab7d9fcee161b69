"""RRT over the 2D plane with exact segment-disc collision checks, plus
shortest-path extraction over the grown tree."""

import heapq
import json
from dataclasses import dataclass, field

import numpy as np


class PlanNotFound(RuntimeError):
    """The tree never connected the start to the goal region."""


@dataclass
class PlannerConfig:
    # extra clearance beyond the hazard radius; must exceed the monitor's
    # smallest inflated certificate radius or tight passages livelock
    margin: float = 0.2
    step_size: float = 0.25  # scaled with map size by default_config_for
    goal_bias: float = 0.1
    max_iters: int = 20_000
    goal_tol: float = 0.25

    @classmethod
    def for_world(cls, world, **overrides):
        scale = world.size / 4.0
        cfg = cls(step_size=0.25 * scale, goal_tol=0.25 * scale)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class Tree:
    points: list  # list of (2,) arrays; node 0 is the start
    parents: list  # parent index per node; -1 for the root
    edge_lengths: list
    goal_node: int | None = None  # node whose segment to the goal is clear


def point_segment_distance(p, a, b):
    """Exact distance from point p to segment [a, b]."""
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def segment_free(p, q, world, margin):
    """True iff the segment keeps strictly more than radius+margin clearance
    from every hazard center."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    for cx, cy, r in world.hazards:
        if point_segment_distance((cx, cy), p, q) <= r + margin:
            return False
    return True


def rrt_build(world, cfg=None, seed=0):
    """Grow a collision-free tree from world.start until it can connect the
    final goal, or raise PlanNotFound after cfg.max_iters samples."""
    cfg = cfg or PlannerConfig.for_world(world)
    rng = np.random.default_rng(seed)
    start = np.asarray(world.start, dtype=float)
    goal = np.asarray(world.goal, dtype=float)
    tree = Tree(points=[start], parents=[-1], edge_lengths=[0.0])
    pts = np.empty((cfg.max_iters + 1, 2))
    pts[0] = start
    n = 1
    for _ in range(cfg.max_iters):
        if rng.random() < cfg.goal_bias:
            sample = goal.copy()
        else:
            sample = rng.uniform(0.0, world.size, size=2)
        d = np.linalg.norm(pts[:n] - sample, axis=1)
        nearest = int(np.argmin(d))
        base = pts[nearest]
        dist = d[nearest]
        if dist == 0.0:
            continue
        new = sample if dist <= cfg.step_size else base + (sample - base) * (cfg.step_size / dist)
        if not segment_free(base, new, world, cfg.margin):
            continue
        tree.points.append(new.copy())
        tree.parents.append(nearest)
        tree.edge_lengths.append(float(np.linalg.norm(new - base)))
        pts[n] = new
        n += 1
        if np.linalg.norm(new - goal) <= cfg.goal_tol and segment_free(new, goal, world, cfg.margin):
            tree.goal_node = n - 1
            return tree
    raise PlanNotFound(f"no path after {cfg.max_iters} iterations")


def extract_path(tree, world):
    """Shortest start-to-goal waypoint path over the tree's edges.

    Runs Dijkstra on the (undirected) tree edges plus the goal connection
    edge; on a tree this coincides with the unique root-to-goal-node path.
    """
    if tree.goal_node is None:
        raise PlanNotFound("tree does not reach the goal region")
    n = len(tree.points)
    adj = [[] for _ in range(n)]
    for i in range(1, n):
        p = tree.parents[i]
        w = tree.edge_lengths[i]
        adj[i].append((p, w))
        adj[p].append((i, w))
    dist = np.full(n, np.inf)
    prev = np.full(n, -1, dtype=int)
    dist[0] = 0.0
    heap = [(0.0, 0)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if not np.isfinite(dist[tree.goal_node]):
        raise PlanNotFound("goal node unreachable in tree")
    path = [np.asarray(world.goal, dtype=float)]
    u = tree.goal_node
    while u != -1:
        path.append(tree.points[u])
        u = int(prev[u]) if u != 0 else -1
    path.reverse()
    return np.array(path)


def plan_path(world, cfg=None, seed=0):
    cfg = cfg or PlannerConfig.for_world(world)
    tree = rrt_build(world, cfg, seed)
    return extract_path(tree, world)


def path_to_json(path, cfg, seed):
    return json.dumps(
        {
            "waypoints": np.asarray(path).tolist(),
            "planner": {
                "margin": cfg.margin,
                "step_size": cfg.step_size,
                "goal_bias": cfg.goal_bias,
                "max_iters": cfg.max_iters,
                "goal_tol": cfg.goal_tol,
            },
            "seed": seed,
        }
    )


def path_from_json(text):
    doc = json.loads(text)
    return np.asarray(doc["waypoints"], dtype=float)
