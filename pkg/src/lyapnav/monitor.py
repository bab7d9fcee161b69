"""Runtime safety monitor: certified circle over-approximations of regions of
attraction, a precomputed level-to-radius lookup table, and per-step sink
selection along a planned path.

The value function V is consumed through a small duck-typed interface:
``value(X) -> (n,)`` and ``grad(X) -> (n, dim)`` over goal-conditioned states,
with the first two state components being the goal vector.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .envs import HAZARD_RADIUS


class InfeasibleLevelError(RuntimeError):
    """No optimization start ended inside the requested sublevel set."""


class LevelExceededError(RuntimeError):
    """Queried level lies above the largest table key; no certificate exists."""


class MonitorStall(RuntimeError):
    """No candidate sink admits a hazard-clear certified circle."""


@dataclass
class SearchConfig:
    beta: float = 1e3  # penalty weight keeping iterates inside the sublevel set
    n_starts: int = 64
    n_steps: int = 200
    step_init: float = 0.2  # normalized-gradient step sizes, geometric decay
    step_final: float = 1e-3
    feas_tol: float = 1e-4  # slack on V <= C when harvesting feasible points


def heading_projection(kind):
    """Projection keeping heading components on the unit circle, or None for
    robots without a heading. Without it the sublevel search wanders into
    off-manifold states (non-unit headings) that inflate every radius."""
    if envs.intrinsic_dim(kind) == 0:
        return None

    def project(pts):
        norms = np.linalg.norm(pts[:, 2:4], axis=1, keepdims=True)
        pts[:, 2:4] /= np.maximum(norms, 1e-9)
        return pts

    return project


def _ascend(value_fn, grad_fn, levels, box, cfg, rng, project=None):
    """Penalized multi-start ascent of |d_g| constrained to V <= level.

    levels is one level constant per chain. Returns the best feasible |d_g|
    per chain (NaN where a chain never visited the sublevel set). ``project``
    is applied after every step to keep iterates on the state manifold.
    """
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    dim = lo.size
    m = levels.size
    pts = rng.uniform(lo, hi, size=(m, dim))
    if project is not None:
        pts = project(pts)
    best = np.full(m, np.nan)
    span = float(np.max(hi - lo))
    eta0 = max(cfg.step_init * span / 4.0, cfg.step_final * 10)
    etas = np.geomspace(eta0, cfg.step_final, cfg.n_steps)
    for eta in etas:
        vals = value_fn(pts)
        dn = np.linalg.norm(pts[:, :2], axis=1)
        feas = vals <= levels + cfg.feas_tol
        improve = feas & (np.isnan(best) | (dn > best))
        best[improve] = dn[improve]
        g = np.zeros_like(pts)
        nz = dn > 1e-12
        g[nz, :2] = pts[nz, :2] / dn[nz, None]
        infeas = vals > levels
        if np.any(infeas):
            g[infeas] -= cfg.beta * grad_fn(pts[infeas])
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        pts = np.clip(pts + eta * g / norms, lo, hi)
        if project is not None:
            pts = project(pts)
    vals = value_fn(pts)
    dn = np.linalg.norm(pts[:, :2], axis=1)
    feas = vals <= levels + cfg.feas_tol
    improve = feas & (np.isnan(best) | (dn > best))
    best[improve] = dn[improve]
    return best


def overapprox_radius(value_fn, grad_fn, level, box, cfg=None, seed=0, project=None):
    """Radius of the circle over-approximating the 2D projection of the
    sublevel set {V <= level}, centered at the sink."""
    if level <= 0:
        raise ValueError("level constant must be positive")
    cfg = cfg or SearchConfig()
    rng = np.random.default_rng(seed)
    levels = np.full(cfg.n_starts, float(level))
    best = _ascend(value_fn, grad_fn, levels, box, cfg, rng, project)
    if np.all(np.isnan(best)):
        raise InfeasibleLevelError(f"no feasible start for level {level}")
    return float(np.nanmax(best))


def batch_radii(value_fn, grad_fn, levels, box, cfg=None, seed=0, project=None):
    """overapprox_radius for many levels in one vectorized run.

    Returns an array with NaN for infeasible levels.
    """
    cfg = cfg or SearchConfig()
    rng = np.random.default_rng(seed)
    levels = np.asarray(levels, dtype=float)
    tiled = np.repeat(levels, cfg.n_starts)
    best = _ascend(value_fn, grad_fn, tiled, box, cfg, rng, project)
    per_level = best.reshape(levels.size, cfg.n_starts)
    with np.errstate(all="ignore"):
        return np.nanmax(per_level, axis=1)


@dataclass
class RoaLut:
    keys: np.ndarray  # strictly increasing level constants
    radii: np.ndarray  # non-decreasing certified radii
    box: tuple  # (lo, hi) arrays of the searched state box
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    v_digest: str | None = None

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        if self.keys.size < 2:
            raise ValueError("lookup table needs at least 2 keys")
        if np.any(np.diff(self.keys) <= 0):
            raise ValueError("keys must be strictly increasing")
        if np.any(np.diff(self.radii) < 0):
            raise ValueError("radii must be non-decreasing")

    def to_json(self):
        return json.dumps(
            {
                "keys": self.keys.tolist(),
                "radii": self.radii.tolist(),
                "box": [np.asarray(self.box[0]).tolist(), np.asarray(self.box[1]).tolist()],
                "search": vars(self.search),
                "seed": self.seed,
                "v_digest": self.v_digest,
            }
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            keys=np.asarray(doc["keys"]),
            radii=np.asarray(doc["radii"]),
            box=(np.asarray(doc["box"][0]), np.asarray(doc["box"][1])),
            search=SearchConfig(**doc["search"]),
            seed=doc["seed"],
            v_digest=doc["v_digest"],
        )


def build_lut(value_fn, grad_fn, level_grid, box, cfg=None, seed=0, v_digest=None, project=None):
    """Precompute radii for a sorted positive level grid.

    Infeasible levels are dropped with a warning; radii are made monotone
    non-decreasing with a running max so the ceiling-rule query is sound
    against per-level optimizer noise.
    """
    level_grid = np.asarray(level_grid, dtype=float)
    if np.any(level_grid <= 0) or np.any(np.diff(level_grid) <= 0):
        raise ValueError("level grid must be positive and strictly increasing")
    radii = batch_radii(value_fn, grad_fn, level_grid, box, cfg, seed, project)
    keep = ~np.isnan(radii)
    if keep.sum() < 2:
        raise InfeasibleLevelError("fewer than 2 feasible levels in the grid")
    if not keep.all():
        import warnings

        warnings.warn(f"dropping {int((~keep).sum())} infeasible lookup levels")
    keys = level_grid[keep]
    radii = np.maximum.accumulate(radii[keep])
    return RoaLut(keys=keys, radii=radii, box=box, search=cfg or SearchConfig(), seed=seed, v_digest=v_digest)


def level_grid_from_values(values, n=32, lo_pct=0.1, hi_pct=99.0):
    """Geometric level grid spanning low-to-high percentiles of observed V.

    The low end is deliberately deep (0.1th percentile) so the table's
    smallest certified circle stays small enough to thread tight passages.
    """
    values = np.asarray(values, dtype=float)
    values = values[values > 0]
    if values.size == 0:
        raise ValueError("need positive V samples to build a level grid")
    lo = float(np.percentile(values, lo_pct))
    hi = float(np.percentile(values, hi_pct))
    if not 0 < lo < hi:
        raise ValueError(f"degenerate percentile range [{lo}, {hi}]")
    return np.geomspace(lo, hi, n)


def lut_query(lut, v):
    """Ceiling-rule lookup: radius of the smallest key >= v.

    Levels at or below the smallest key certify with the smallest radius;
    levels above the largest key have no certificate and raise.
    """
    if v > lut.keys[-1]:
        raise LevelExceededError(f"level {v} exceeds table maximum {lut.keys[-1]}")
    idx = int(np.searchsorted(lut.keys, v, side="left"))
    return float(lut.radii[idx])


def candidate_sinks(g1, g2, delta):
    """Line-search positions from g1 to g2 at fractional granularity delta."""
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must be in (0, 1]")
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    n = int(np.ceil(1.0 / delta))
    fracs = np.minimum(np.arange(n + 1) * delta, 1.0)
    return [g1 + f * (g2 - g1) for f in fracs]


@dataclass
class SinkChoice:
    pos: np.ndarray
    level: float  # V of the current state under this sink
    radius: float  # certified circle radius (uninflated)
    segment: int
    fraction: float

    @property
    def progress(self):
        return self.segment + self.fraction


@dataclass
class MonitorConfig:
    delta: float = 0.1
    window: int = 2  # path segments searched ahead of the current one
    reach_tol: float = 0.1
    radius_inflation: float = 1.05  # absorbs optimizer under-estimation
    stall_patience: int = 50
    step_cap: int = 1000


def select_sink(kind, state, path, seg_idx, world, value_fn, lut, cfg=None):
    """Farthest safe sink among the line-search candidates in the window.

    A candidate is safe when its inflated certified circle clears every
    hazard; among safe candidates the farthest path progress wins, ties
    broken by the larger certified radius. (Radius-first selection livelocks
    in tight passages: the already-traversed open space behind the robot
    always admits a larger circle than the passage ahead, so the monitor
    would keep sending the robot backward.) Raises MonitorStall when nothing
    is safe.
    """
    cfg = cfg or MonitorConfig()
    if envs.in_hazard(state.pos, world):
        raise ValueError("select_sink requires a hazard-free robot position")
    n_seg = max(len(path) - 1, 1)
    seg_idx = min(seg_idx, n_seg - 1)
    best = None
    hz = world.hazards
    for seg in range(seg_idx, min(seg_idx + cfg.window, n_seg)):
        g1, g2 = path[seg], path[min(seg + 1, len(path) - 1)]
        cands = candidate_sinks(g1, g2, cfg.delta)
        fracs = np.minimum(np.arange(len(cands)) * cfg.delta, 1.0)
        for p, frac in zip(cands, fracs):
            level = float(value_fn(envs.goal_condition(state, p)[None, :])[0])
            try:
                radius = lut_query(lut, level)
            except LevelExceededError:
                continue  # no certificate: treat as unsafe
            r_inf = radius * cfg.radius_inflation
            if len(hz):
                clear = np.linalg.norm(hz[:, :2] - p, axis=1) >= r_inf + hz[:, 2]
                if not np.all(clear):
                    continue
            cand = SinkChoice(pos=np.asarray(p, dtype=float), level=level, radius=radius, segment=seg, fraction=float(frac))
            if best is None or (cand.progress, cand.radius) > (best.progress, best.radius):
                best = cand
    if best is None:
        raise MonitorStall(f"no safe sink in window at segment {seg_idx}")
    return best


def _nearest_segment(pos, path, seg_idx, window):
    from .planner import point_segment_distance

    n_seg = max(len(path) - 1, 1)
    best_j, best_d = seg_idx, np.inf
    for j in range(seg_idx, min(seg_idx + window + 1, n_seg)):
        d = point_segment_distance(pos, path[j], path[min(j + 1, len(path) - 1)])
        if d < best_d:
            best_j, best_d = j, d
    return best_j


@dataclass
class RolloutResult:
    outcome: str  # reached | violated | stalled | timeout
    steps: int
    trajectory: list  # per-step dicts (t, pos, sink, level, radius, action)


def monitored_rollout(kind, policy, value_fn, lut, world, path, cfg=None):
    """Follow the planned path under the runtime monitor.

    Each step re-runs the sink line search, drives the policy toward the
    chosen sink, and terminates immediately on hazard entry. A stall holds
    the last safe sink for cfg.stall_patience steps before giving up.
    """
    cfg = cfg or MonitorConfig()
    state = envs.initial_state(kind, pos=np.asarray(world.start, dtype=float))
    seg_idx = 0
    stall = 0
    last_choice = None
    trajectory = []
    for t in range(cfg.step_cap):
        try:
            choice = select_sink(kind, state, path, seg_idx, world, value_fn, lut, cfg)
            stall = 0
        except MonitorStall:
            stall += 1
            if last_choice is None or stall > cfg.stall_patience:
                return RolloutResult("stalled", t, trajectory)
            choice = last_choice
        last_choice = choice
        seg_idx = max(seg_idx, choice.segment)
        a = policy.forward(envs.goal_condition(state, choice.pos))
        state = envs.step(kind, state, a)
        trajectory.append(
            {
                "t": t,
                "pos": state.pos.copy(),
                "sink": choice.pos.copy(),
                "level": choice.level,
                "radius": choice.radius,
                "action": np.asarray(a, dtype=float).copy(),
            }
        )
        if envs.in_hazard(state.pos, world):
            return RolloutResult("violated", t + 1, trajectory)
        if np.linalg.norm(state.pos - np.asarray(world.goal)) < cfg.reach_tol:
            return RolloutResult("reached", t + 1, trajectory)
        seg_idx = _nearest_segment(state.pos, path, seg_idx, cfg.window)
    return RolloutResult("timeout", cfg.step_cap, trajectory)


def state_box(kind, reach):
    """Search box for the sublevel-set ascent: goal vector within +-reach,
    intrinsic components within their dynamic ranges."""
    if kind is envs.RobotKind.SWEEPING:
        lo = [-reach, -reach]
        hi = [reach, reach]
    elif kind is envs.RobotKind.POINT:
        lo = [-reach, -reach, -1.0, -1.0, -envs.POINT_V_MAX]
        hi = [reach, reach, 1.0, 1.0, envs.POINT_V_MAX]
    else:
        lo = [-reach, -reach, -1.0, -1.0, -envs.CAR_WHEEL_V_MAX, -envs.CAR_WHEEL_V_MAX]
        hi = [reach, reach, 1.0, 1.0, envs.CAR_WHEEL_V_MAX, envs.CAR_WHEEL_V_MAX]
    return (np.array(lo), np.array(hi))


def trajectory_to_csv(trajectory, path):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "sink_x", "sink_y", "level", "radius", "a0", "a1"])
        for row in trajectory:
            w.writerow(
                [row["t"]]
                + [repr(float(v)) for v in row["pos"]]
                + [repr(float(v)) for v in row["sink"]]
                + [repr(float(row["level"])), repr(float(row["radius"]))]
                + [repr(float(v)) for v in row["action"]]
            )
