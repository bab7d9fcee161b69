"""Benchmark driver: per-episode evaluation protocols, baseline training,
and result export.

Three evaluation methods share per-episode worlds for paired comparison:
  monitored : plan a waypoint path, then follow it under the runtime monitor
  e2e       : hazard-aware end-to-end policy driven straight at the goal
  h-e2e     : the same end-to-end policy chasing planned waypoints
A fourth protocol, ``direct``, drives the hazard-free goal policy straight at
the goal with no monitor; it only serves as a steps-to-reach reference.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import colearn, envs, monitor, nn, planner
from .envs import RobotKind

STEP_CAPS = {1: 1000, 2: 4000, 3: 16_000}

METHODS = ("monitored", "e2e", "h-e2e", "direct")


@dataclass
class EpisodeReport:
    method: str
    robot: str
    level: int
    world_seed: int
    outcome: str  # reached | violated | stalled | timeout | plan_failed
    steps: int


@dataclass
class BenchmarkSummary:
    method: str
    robot: str
    level: int
    n_episodes: int
    violation_rate: float
    reach_rate: float
    mean_steps_to_reach: float  # NaN when nothing reached

    def __post_init__(self):
        assert 0.0 <= self.violation_rate <= 1.0
        assert 0.0 <= self.reach_rate <= 1.0
        assert self.violation_rate + self.reach_rate <= 1.0 + 1e-12


class E2ePolicy:
    """Hazard-aware goal policy over the raw observation [v_haz, d_g, intrinsic]."""

    def __init__(self, kind, net):
        self.kind = kind
        self.net = net

    def observe(self, state, goal, world):
        return np.concatenate([envs.hazard_observation(state, world), envs.goal_condition(state, goal)])

    def act(self, state, goal, world):
        return self.net.forward(self.observe(state, goal, world))

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        nn.save_params(self.net, os.path.join(out_dir, "e2e_pi.json"))
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump({"robot": self.kind.value, "files": ["e2e_pi"]}, f, indent=2)

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "manifest.json")) as f:
            kind = RobotKind(json.load(f)["robot"])
        policy = make_e2e_policy(kind)
        nn.load_params(os.path.join(out_dir, "e2e_pi.json"), policy.net)
        return policy


def e2e_obs_dim(kind):
    return 16 + envs.state_dim(kind)


def make_e2e_policy(kind, hidden=(64, 64), seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE2]))
    net = nn.Mlp([e2e_obs_dim(kind)] + list(hidden) + [envs.action_dim(kind)], "tanh", rng)
    return E2ePolicy(kind, net)


@dataclass
class E2eTrainConfig:
    level: int = 1
    penalty: float = 10.0
    gamma: float = 0.97
    tau: float = 0.005
    batch_size: int = 256
    episodes: int = 150
    grad_steps: int = 50
    horizon: int = 300
    noise: float = 0.15
    replay_capacity: int = 100_000
    reach_tol: float = 0.1
    lr: float = 1e-3
    actor_lr: float = 3e-4
    warmup_episodes: int = 10
    hidden: tuple = (64, 64)


def train_e2e(kind, cfg=None, seed=0):
    """DDPG training of the end-to-end baseline in randomly generated hazard
    worlds, with the hazard-penalized progress reward."""
    cfg = cfg or E2eTrainConfig()
    policy = make_e2e_policy(kind, cfg.hidden, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3]))
    q_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4]))
    na = envs.action_dim(kind)
    obs_dim = e2e_obs_dim(kind)
    q = nn.Mlp([obs_dim + na] + list(cfg.hidden) + [1], "identity", q_rng)
    pi_t, q_t = policy.net.copy(), q.copy()
    adam_pi = nn.AdamState(policy.net.params(), lr=cfg.actor_lr)
    adam_q = nn.AdamState(q.params(), lr=cfg.lr)
    buffer = colearn.ReplayBuffer(cfg.replay_capacity, obs_dim, na)
    for ep in range(cfg.episodes):
        world = envs.make_world(cfg.level, int(rng.integers(2**31)))
        state = envs.initial_state(kind, pos=world.start, heading=rng.uniform(0, 2 * np.pi))
        goal = world.goal
        for _ in range(cfg.horizon):
            o = policy.observe(state, goal, world)
            if ep < cfg.warmup_episodes:
                a = rng.uniform(-1.0, 1.0, size=na)
            else:
                a = np.clip(pi_t.forward(o) + rng.normal(0.0, cfg.noise, size=na), -1.0, 1.0)
            nxt = envs.step(kind, state, a)
            r = envs.e2e_reward(goal, state, nxt, world, cfg.penalty)
            o1 = policy.observe(nxt, goal, world)
            done = np.linalg.norm(goal - nxt.pos) < cfg.reach_tol
            buffer.add(o, a, r, o1, done)
            state = nxt
            if done:
                break
        if buffer.size < cfg.batch_size:
            continue
        for _ in range(cfg.grad_steps):
            b = buffer.sample(rng, cfg.batch_size)
            n = b["s"].shape[0]
            a1 = np.atleast_2d(pi_t.forward(b["s1"]))
            q1 = np.atleast_2d(q_t.forward(np.hstack([b["s1"], a1])))[:, 0]
            y = b["r"] + cfg.gamma * (1.0 - b["done"]) * q1
            x = np.hstack([b["s"], b["a"]])
            err = np.atleast_2d(q.forward(x))[:, 0] - y
            grads, _ = q.gradients(x, (2.0 * err / n)[:, None])
            nn.adam_step(adam_q, q.params(), grads)
            a = np.atleast_2d(policy.net.forward(b["s"]))
            x = np.hstack([b["s"], a])
            ga = q_t.input_gradients(x, -np.ones((n, 1)) / n)[:, -na:]
            grads, _ = policy.net.gradients(b["s"], ga)
            nn.adam_step(adam_pi, policy.net.params(), grads)
            nn.polyak_update(pi_t, policy.net, cfg.tau)
            nn.polyak_update(q_t, q, cfg.tau)
        nn.check_finite(policy.net, f"in e2e actor after episode {ep}")
        nn.check_finite(q, f"in e2e critic after episode {ep}")
    return policy


def _episode(method, robot, level, world, outcome, steps):
    return EpisodeReport(method, robot.value, level, world.seed, outcome, steps)


def run_episode(method, agent, world, config=None, lut=None, plan_seed=0, reach_tol=0.1):
    """One evaluation episode of the given method on a fixed world.

    ``agent`` is a trained co-learning agent for ``monitored``/``direct`` and
    an E2ePolicy for ``e2e``/``h-e2e``. A failed plan is reported with the
    distinct ``plan_failed`` outcome (counts as not reached, not violated).
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    level = world.level if world.level in STEP_CAPS else 1
    cap = STEP_CAPS[level]
    kind = agent.kind
    if method == "monitored":
        if lut is None:
            raise ValueError("monitored episodes need a lookup table")
        try:
            path = planner.plan_path(world, seed=plan_seed)
        except planner.PlanNotFound:
            return _episode(method, kind, level, world, "plan_failed", 0)
        cfg = replace(config or monitor.MonitorConfig(), step_cap=cap)
        res = monitor.monitored_rollout(kind, agent.policy, agent.v.value, lut, world, path, cfg)
        return _episode(method, kind, level, world, res.outcome, res.steps)
    if method == "h-e2e":
        try:
            path = planner.plan_path(world, seed=plan_seed)
        except planner.PlanNotFound:
            return _episode(method, kind, level, world, "plan_failed", 0)
        waypoints = list(path)
    elif method == "e2e":
        waypoints = [np.asarray(world.goal, dtype=float)]
    else:  # direct: hazard-free goal policy straight at the goal, no monitor
        waypoints = [np.asarray(world.goal, dtype=float)]
    state = envs.initial_state(kind, pos=np.asarray(world.start, dtype=float))
    wp = 0
    goal = np.asarray(world.goal, dtype=float)
    for t in range(cap):
        target = waypoints[wp]
        if method == "direct":
            a = agent.policy.forward(envs.goal_condition(state, target))
        else:
            a = agent.act(state, target, world)
        state = envs.step(kind, state, a)
        if method != "direct" and envs.in_hazard(state.pos, world):
            return _episode(method, kind, level, world, "violated", t + 1)
        if np.linalg.norm(state.pos - goal) < reach_tol:
            return _episode(method, kind, level, world, "reached", t + 1)
        while wp < len(waypoints) - 1 and np.linalg.norm(state.pos - waypoints[wp]) < reach_tol:
            wp += 1
    return _episode(method, kind, level, world, "timeout", cap)


def episode_world_seed(seed, index):
    """Per-episode world seed shared across methods for paired comparison."""
    return 1_000_003 * seed + index


def summarize(episodes):
    """Order-independent aggregation of episode reports into a summary."""
    if not episodes:
        raise ValueError("cannot summarize zero episodes")
    methods = {e.method for e in episodes}
    robots = {e.robot for e in episodes}
    levels = {e.level for e in episodes}
    if len(methods) != 1 or len(robots) != 1 or len(levels) != 1:
        raise ValueError("episodes must share method, robot, and level")
    n = len(episodes)
    viol = sum(e.outcome == "violated" for e in episodes) / n
    reached = [e for e in episodes if e.outcome == "reached"]
    reach = len(reached) / n
    mean_steps = float(np.mean([e.steps for e in reached])) if reached else float("nan")
    return BenchmarkSummary(methods.pop(), robots.pop(), levels.pop(), n, viol, reach, mean_steps)


def run_benchmark(method, agent, level, n_episodes, seed=0, lut=None, config=None):
    """n_episodes fresh worlds (deterministic per seed), one report each."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    episodes = []
    for i in range(n_episodes):
        ws = episode_world_seed(seed, i)
        world = envs.make_world(level, ws)
        episodes.append(run_episode(method, agent, world, config, lut=lut, plan_seed=ws))
    return summarize(episodes), episodes


EPISODE_FIELDS = ["method", "robot", "level", "world_seed", "outcome", "steps"]
SUMMARY_FIELDS = [
    "robot",
    "level",
    "method",
    "n_episodes",
    "violation_rate",
    "reach_rate",
    "mean_steps_to_reach",
]


def _steps_cell(summary):
    if summary.reach_rate == 0.0 or math.isnan(summary.mean_steps_to_reach):
        return "-"
    return f"{summary.mean_steps_to_reach:.1f}"


def render_table(summaries):
    """Text table with one row per (robot, level, method)."""
    lines = [f"{'Robot':<10} {'Level':<6} {'Method':<10} {'Violation':<10} {'Reach':<7} {'Steps':<9}"]
    for s in sorted(summaries, key=lambda s: (s.robot, s.level, s.method)):
        lines.append(
            f"{s.robot:<10} {s.level:<6} {s.method:<10} "
            f"{s.violation_rate:<10.2f} {s.reach_rate:<7.2f} {_steps_cell(s):<9}"
        )
    return "\n".join(lines) + "\n"


def write_reports(summaries, episodes, out_dir):
    """Per-episode CSV, summary CSV keyed by (robot, level, method), and the
    rendered text table. Deterministic for fixed inputs."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "episodes.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EPISODE_FIELDS)
        w.writeheader()
        w.writerows(asdict(e) for e in episodes)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for s in sorted(summaries, key=lambda s: (s.robot, s.level, s.method)):
            row = {k: getattr(s, k) for k in SUMMARY_FIELDS}
            row["mean_steps_to_reach"] = _steps_cell(s)
            w.writerow(row)
    with open(os.path.join(out_dir, "table.txt"), "w") as f:
        f.write(render_table(summaries))
