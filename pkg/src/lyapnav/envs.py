"""Analytic 2D robot dynamics, goal conditioning, rewards, and hazard worlds.

Three robot kinds share a 2D position. The intrinsic (goal-independent) state
differs per kind:
  sweeping: none (single integrator on position)
  point:    heading unit vector (sin, cos) and forward speed
  car:      heading unit vector and left/right wheel speeds
All dynamics are Euler-integrated at a fixed dt and deterministic.
"""

import enum
import json
from dataclasses import dataclass, field

import numpy as np

DT = 0.1
SWEEP_A_MAX = 1.0
POINT_ACCEL = 2.0
POINT_TURN_RATE = 4.0
POINT_V_MAX = 0.5
CAR_WHEEL_ACCEL = 1.0
CAR_WHEEL_V_MAX = 1.0
CAR_TRACK_WIDTH = 0.4

HAZARD_RADIUS = 0.2
START_GOAL_CLEARANCE = 0.3  # extra clearance beyond the hazard radius

# level -> (map side length, hazard count)
LEVELS = {1: (4.0, 8), 2: (8.0, 32), 3: (16.0, 128)}


class RobotKind(enum.Enum):
    SWEEPING = "sweeping"
    POINT = "point"
    CAR = "car"


_INTRINSIC_DIM = {RobotKind.SWEEPING: 0, RobotKind.POINT: 3, RobotKind.CAR: 4}


def intrinsic_dim(kind):
    return _INTRINSIC_DIM[kind]


def action_dim(kind):
    return 2


def state_dim(kind):
    """Dimension of the goal-conditioned state [d_g, intrinsic]."""
    return 2 + intrinsic_dim(kind)


@dataclass
class PhysState:
    pos: np.ndarray
    intrinsic: np.ndarray

    def copy(self):
        return PhysState(self.pos.copy(), self.intrinsic.copy())


def initial_state(kind, pos=(0.0, 0.0), heading=0.0):
    pos = np.asarray(pos, dtype=float)
    if kind is RobotKind.SWEEPING:
        intr = np.zeros(0)
    elif kind is RobotKind.POINT:
        intr = np.array([np.sin(heading), np.cos(heading), 0.0])
    else:
        intr = np.array([np.sin(heading), np.cos(heading), 0.0, 0.0])
    return PhysState(pos, intr)


def _heading_angle(intr):
    return np.arctan2(intr[0], intr[1])


def step(kind, s, a, dt=DT):
    """Advance the dynamics by one Euler step. Actions clamp to [-1, 1]."""
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    if kind is RobotKind.SWEEPING:
        return PhysState(s.pos + SWEEP_A_MAX * a * dt, s.intrinsic.copy())
    if kind is RobotKind.POINT:
        v = np.clip(s.intrinsic[2] + POINT_ACCEL * a[0] * dt, -POINT_V_MAX, POINT_V_MAX)
        theta = _heading_angle(s.intrinsic) + POINT_TURN_RATE * a[1] * dt
        heading = np.array([np.sin(theta), np.cos(theta)])
        pos = s.pos + v * np.array([heading[1], heading[0]]) * dt  # (cos, sin)
        return PhysState(pos, np.array([heading[0], heading[1], v]))
    # car: differential drive
    vl = np.clip(s.intrinsic[2] + CAR_WHEEL_ACCEL * a[0] * dt, -CAR_WHEEL_V_MAX, CAR_WHEEL_V_MAX)
    vr = np.clip(s.intrinsic[3] + CAR_WHEEL_ACCEL * a[1] * dt, -CAR_WHEEL_V_MAX, CAR_WHEEL_V_MAX)
    v = 0.5 * (vl + vr)
    omega = (vr - vl) / CAR_TRACK_WIDTH
    theta = _heading_angle(s.intrinsic) + omega * dt
    heading = np.array([np.sin(theta), np.cos(theta)])
    pos = s.pos + v * np.array([heading[1], heading[0]]) * dt
    return PhysState(pos, np.array([heading[0], heading[1], vl, vr]))


def goal_condition(s, g):
    """Goal-conditioned state vector [g - pos, intrinsic]."""
    g = np.asarray(g, dtype=float)
    return np.concatenate([g - s.pos, s.intrinsic])


def featurize(kind, x):
    """Policy/critic input features for a goal-conditioned state batch.

    Appends a softened unit goal direction and the goal distance so control
    behavior generalizes across goal ranges: [d_g, d_g/(|d_g|+eps), |d_g|,
    intrinsic]. For robots with a heading (state width >= 5) the dot and
    cross products of the heading direction with the goal direction are
    appended as well; these are the polar coordinates of the classic parking
    control law. The Lyapunov value function keeps the raw state.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    d = x2[:, :2]
    n = np.linalg.norm(d, axis=1, keepdims=True)
    dhat = d / (n + 0.05)
    cols = [d, dhat, n, x2[:, 2:]]
    if x2.shape[1] >= 5:
        # intrinsic heading is stored as (sin t, cos t); motion direction is
        # (cos t, sin t)
        hx, hy = x2[:, 3], x2[:, 2]
        align = hx * dhat[:, 0] + hy * dhat[:, 1]
        cross = hx * dhat[:, 1] - hy * dhat[:, 0]
        cols.append(np.column_stack([align, cross]))
    out = np.hstack(cols)
    return out[0] if squeeze else out


def feature_dim(kind):
    return state_dim(kind) + (3 if kind is RobotKind.SWEEPING else 5)


def sink_mask(kind):
    """0/1 mask over the goal-conditioned state selecting what a sink keeps.

    The sink zeroes the goal vector and every speed component and keeps the
    heading direction; multiplying a goal-conditioned state by this mask gives
    its sink representative.
    """
    if kind is RobotKind.SWEEPING:
        return np.zeros(2)
    if kind is RobotKind.POINT:
        return np.array([0.0, 0.0, 1.0, 1.0, 0.0])
    return np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0])


def reward(g, s_t, s_next):
    """Progress toward the goal: previous distance minus new distance."""
    g = np.asarray(g, dtype=float)
    return float(np.linalg.norm(g - s_t.pos) - np.linalg.norm(g - s_next.pos))


def e2e_reward(g, s_t, s_next, world, penalty=10.0):
    """Progress reward minus a fixed penalty while inside any hazard."""
    r = reward(g, s_t, s_next)
    if in_hazard(s_next.pos, world):
        r -= penalty
    return r


@dataclass
class World:
    size: float
    hazards: np.ndarray  # (n, 3) rows of (cx, cy, radius); may be empty
    start: np.ndarray
    goal: np.ndarray
    level: int = 0
    seed: int | None = None

    def to_json(self):
        return json.dumps(
            {
                "size": self.size,
                "level": self.level,
                "seed": self.seed,
                "start": self.start.tolist(),
                "goal": self.goal.tolist(),
                "hazards": self.hazards.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        hazards = np.asarray(doc["hazards"], dtype=float).reshape(-1, 3)
        return cls(
            size=float(doc["size"]),
            hazards=hazards,
            start=np.asarray(doc["start"], dtype=float),
            goal=np.asarray(doc["goal"], dtype=float),
            level=int(doc["level"]),
            seed=doc["seed"],
        )


def empty_world(size=4.0):
    return World(
        size=size,
        hazards=np.zeros((0, 3)),
        start=np.array([0.5, 0.5]),
        goal=np.array([size - 0.5, size - 0.5]),
    )


def in_hazard(p, world):
    """Closed-disk membership: the boundary counts as a violation."""
    if len(world.hazards) == 0:
        return False
    p = np.asarray(p, dtype=float)
    d = np.linalg.norm(world.hazards[:, :2] - p, axis=1)
    return bool(np.any(d <= world.hazards[:, 2]))


def hazard_observation(s, world):
    """Vectors toward the 8 nearest hazard centers, nearest first, zero-padded."""
    obs = np.zeros(16)
    n = len(world.hazards)
    if n == 0:
        return obs
    vecs = world.hazards[:, :2] - s.pos
    d = np.linalg.norm(vecs, axis=1)
    order = np.argsort(d, kind="stable")[:8]
    for slot, idx in enumerate(order):
        obs[2 * slot : 2 * slot + 2] = vecs[idx]
    return obs


class WorldGenerationError(RuntimeError):
    """Hazard sampling could not satisfy the clearance constraints."""


def make_world(level, seed, hazard_radius=HAZARD_RADIUS, max_attempts=1000):
    """Random world at the given difficulty level, deterministic per seed."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {sorted(LEVELS)}, got {level}")
    size, n_hazards = LEVELS[level]
    rng = np.random.default_rng(seed)
    start = np.array([0.5, 0.5])
    goal = np.array([size - 0.5, size - 0.5])
    clearance = hazard_radius + START_GOAL_CLEARANCE
    hazards = np.zeros((n_hazards, 3))
    for i in range(n_hazards):
        for _ in range(max_attempts):
            c = rng.uniform(hazard_radius, size - hazard_radius, size=2)
            if np.linalg.norm(c - start) >= clearance and np.linalg.norm(c - goal) >= clearance:
                hazards[i] = (c[0], c[1], hazard_radius)
                break
        else:
            raise WorldGenerationError(f"could not place hazard {i} (seed {seed})")
    return World(size=size, hazards=hazards, start=start, goal=goal, level=level, seed=seed)
