"""Co-learning of a goal-conditioned policy with a Lyapunov critic pair.

One training loop jointly updates four networks over a shared replay buffer:
the actor pi, the reward critic Q, the Lyapunov value V, and the Lyapunov
critic LQ that predicts V of the next state from (state, action). pi, Q and LQ
carry Polyak-averaged target copies; V does not.

Training runs in a hazard-free arena with randomly sampled goals so the
goal-conditioned networks generalize over goal positions.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import envs, nn
from .envs import RobotKind


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.5  # weight of the Lyapunov critic in the actor loss
    batch_size: int = 256
    episodes: int = 200
    grad_steps: int = 50  # gradient phases per episode
    noise: float = 0.1  # exploration noise std, in action units
    noise_final: float | None = None  # decay target; None keeps noise constant
    replay_capacity: int = 100_000
    horizon: int = 200
    # hinge margins for the V update; without them V = 0 everywhere is a
    # degenerate minimum of the plain risk and training collapses
    pos_margin: float = 0.1  # require V >= pos_margin * |d_g|
    lie_margin: float = 0.01  # require V to drop by at least this per step
    reach_tol: float = 0.1
    goal_range: float = 3.0  # goals sampled in a disk of this radius
    goal_min: float = 0.3
    lr: float = 1e-3
    actor_lr: float = 3e-4
    warmup_episodes: int = 10  # uniform random actions to seed the replay
    hindsight_relabels: int = 4  # extra buffer copies per transition with future achieved goals
    hidden: tuple = (64, 64)

    def validate(self):
        assert 0.0 <= self.gamma <= 1.0
        assert 0.0 < self.tau <= 1.0
        assert self.alpha >= 0.0
        assert self.batch_size > 0 and self.horizon > 0
        assert 0.0 < self.reach_tol < self.goal_min


class LyapunovNet:
    """Candidate Lyapunov function over goal-conditioned states.

    Parametrized as V(x) = f(x) - f(sink(x)) where sink(x) masks the state
    down to its sink representative (zero goal vector, zero speeds, heading
    kept). This makes V vanish identically on sinks; positivity and decrease
    are shaped by training.
    """

    def __init__(self, kind, hidden=(64, 64), rng=None):
        self.kind = kind
        self.mask = envs.sink_mask(kind)
        dim = envs.state_dim(kind)
        self.net = nn.Mlp([dim] + list(hidden) + [1], "identity", rng)

    @property
    def in_dim(self):
        return self.net.in_dim

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.net.forward(x)[:, 0] - self.net.forward(x * self.mask)[:, 0]

    def grad(self, x):
        """Gradient of V w.r.t. the state, one row per sample."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ones = np.ones((x.shape[0], 1))
        g1 = self.net.input_gradients(x, ones)
        g2 = self.net.input_gradients(x * self.mask, ones)
        return g1 - g2 * self.mask

    def param_grads(self, x, upstream):
        """Gradients of sum(upstream * V(x)) w.r.t. the network parameters."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(upstream, dtype=float).reshape(-1, 1)
        points = np.vstack([x, x * self.mask])
        ups = np.vstack([u, -u])
        return self.net.gradients(points, ups)[0]


class Policy:
    """Deterministic actor over raw goal-conditioned states.

    Wraps the actor network with the feature map so callers (rollouts, the
    runtime monitor) can feed raw [d_g, intrinsic] states.
    """

    def __init__(self, kind, net):
        self.kind = kind
        self.net = net

    def forward(self, sg):
        return self.net.forward(envs.featurize(self.kind, sg))


class ReplayBuffer:
    def __init__(self, capacity, state_dim, action_dim):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s1 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.insert_at = 0

    def add(self, s, a, r, s1, done):
        i = self.insert_at
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s1[i], self.done[i] = s1, float(done)
        self.insert_at = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, n):
        idx = rng.choice(self.size, size=min(n, self.size), replace=False)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "s1": self.s1[idx],
            "done": self.done[idx],
        }


@dataclass
class Agent:
    kind: RobotKind
    pi: nn.Mlp
    q: nn.Mlp
    v: LyapunovNet
    lq: nn.Mlp
    pi_t: nn.Mlp
    q_t: nn.Mlp
    lq_t: nn.Mlp

    @property
    def policy(self):
        return Policy(self.kind, self.pi)

    @property
    def target_policy(self):
        return Policy(self.kind, self.pi_t)

    def act(self, sg):
        return self.policy.forward(np.asarray(sg, dtype=float))

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        nn.save_params(self.pi, os.path.join(out_dir, "pi.json"))
        nn.save_params(self.q, os.path.join(out_dir, "q.json"))
        nn.save_params(self.v.net, os.path.join(out_dir, "v.json"))
        nn.save_params(self.lq, os.path.join(out_dir, "lq.json"))
        nn.save_params(self.pi_t, os.path.join(out_dir, "pi_target.json"))
        nn.save_params(self.q_t, os.path.join(out_dir, "q_target.json"))
        nn.save_params(self.lq_t, os.path.join(out_dir, "lq_target.json"))
        manifest = {
            "robot": self.kind.value,
            "v_digest": nn.params_digest(self.v.net),
            "files": ["pi", "q", "v", "lq", "pi_target", "q_target", "lq_target"],
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2)

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "manifest.json")) as f:
            manifest = json.load(f)
        kind = RobotKind(manifest["robot"])
        agent = make_agent(kind)
        nn.load_params(os.path.join(out_dir, "pi.json"), agent.pi)
        nn.load_params(os.path.join(out_dir, "q.json"), agent.q)
        nn.load_params(os.path.join(out_dir, "v.json"), agent.v.net)
        nn.load_params(os.path.join(out_dir, "lq.json"), agent.lq)
        nn.load_params(os.path.join(out_dir, "pi_target.json"), agent.pi_t)
        nn.load_params(os.path.join(out_dir, "q_target.json"), agent.q_t)
        nn.load_params(os.path.join(out_dir, "lq_target.json"), agent.lq_t)
        return agent


def make_agent(kind, hidden=(64, 64), seed=0):
    """Fresh agent with targets initialized to the online networks."""
    d = envs.feature_dim(kind)
    na = envs.action_dim(kind)
    ss = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(4)]
    pi = nn.Mlp([d] + list(hidden) + [na], "tanh", rngs[0])
    q = nn.Mlp([d + na] + list(hidden) + [1], "identity", rngs[1])
    v = LyapunovNet(kind, hidden, rngs[2])
    lq = nn.Mlp([d + na] + list(hidden) + [1], "identity", rngs[3])
    return Agent(kind, pi, q, v, lq, pi.copy(), q.copy(), lq.copy())


def sink_state(kind, batch):
    """Sink representatives of a batch of goal-conditioned states."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValueError("sink_state: empty batch")
    return batch * envs.sink_mask(kind)


def lyapunov_risk(value_fn, s, s1, sinks):
    """Sample estimate of the Lyapunov training risk.

    Mean of V(sink)^2 + max(0, -V(s)) + max(0, V(s1) - V(s)).
    """
    vs = value_fn(s)
    vs1 = value_fn(s1)
    vo = value_fn(sinks)
    return float(np.mean(vo**2 + np.maximum(0.0, -vs) + np.maximum(0.0, vs1 - vs)))


def lq_loss(lq, v, s, a, s1, kind=None):
    """Regression loss of LQ(s, a) onto V(s1), mean squared over the batch."""
    sf = envs.featurize(kind, np.atleast_2d(s))
    pred = np.atleast_2d(lq.forward(np.hstack([sf, np.atleast_2d(a)])))[:, 0]
    target = v.value(s1)
    return float(np.mean((pred - target) ** 2))


def policy_loss(pi, q_t, lq_t, s, alpha, kind=None):
    """Actor loss: mean of -Q'(s, pi(s)) + alpha * LQ'(s, pi(s))."""
    s = envs.featurize(kind, np.atleast_2d(np.asarray(s, dtype=float)))
    a = np.atleast_2d(pi.forward(s))
    x = np.hstack([s, a])
    qv = np.atleast_2d(q_t.forward(x))[:, 0]
    lv = np.atleast_2d(lq_t.forward(x))[:, 0]
    return float(np.mean(-qv + alpha * lv))


class Trainer:
    """Owns the Adam states and performs the per-batch updates."""

    def __init__(self, agent, cfg):
        self.agent = agent
        self.cfg = cfg
        self.adam_pi = nn.AdamState(agent.pi.params(), lr=cfg.actor_lr)
        self.adam_q = nn.AdamState(agent.q.params(), lr=cfg.lr)
        self.adam_v = nn.AdamState(agent.v.net.params(), lr=cfg.lr)
        self.adam_lq = nn.AdamState(agent.lq.params(), lr=cfg.lr)

    def train_q(self, batch):
        ag, cfg = self.agent, self.cfg
        n = batch["s"].shape[0]
        sf = envs.featurize(ag.kind, batch["s"])
        s1f = envs.featurize(ag.kind, batch["s1"])
        a1 = np.atleast_2d(ag.pi_t.forward(s1f))
        q1 = np.atleast_2d(ag.q_t.forward(np.hstack([s1f, a1])))[:, 0]
        y = batch["r"] + cfg.gamma * (1.0 - batch["done"]) * q1
        x = np.hstack([sf, batch["a"]])
        q = np.atleast_2d(ag.q.forward(x))[:, 0]
        err = q - y
        upstream = (2.0 * err / n)[:, None]
        grads, _ = ag.q.gradients(x, upstream)
        nn.adam_step(self.adam_q, ag.q.params(), grads)
        return float(np.mean(err**2))

    def train_v(self, batch):
        ag, cfg = self.agent, self.cfg
        s, s1 = batch["s"], batch["s1"]
        n = s.shape[0]
        sinks = sink_state(ag.kind, s)
        vs = ag.v.value(s)
        vs1 = ag.v.value(s1)
        vo = ag.v.value(sinks)
        floor = cfg.pos_margin * np.linalg.norm(s[:, :2], axis=1)
        pos_active = vs < floor
        lie_active = vs1 - vs > -cfg.lie_margin
        u_sink = 2.0 * vo / n
        u_s = (-pos_active.astype(float) - lie_active.astype(float)) / n
        u_s1 = lie_active.astype(float) / n
        points = np.vstack([sinks, s, s1])
        ups = np.concatenate([u_sink, u_s, u_s1])
        grads = ag.v.param_grads(points, ups)
        nn.adam_step(self.adam_v, ag.v.net.params(), grads)
        # reported value is the plain (margin-free) risk
        return float(np.mean(vo**2 + np.maximum(0.0, -vs) + np.maximum(0.0, vs1 - vs)))

    def train_lq(self, batch):
        ag = self.agent
        n = batch["s"].shape[0]
        x = np.hstack([envs.featurize(ag.kind, batch["s"]), batch["a"]])
        pred = np.atleast_2d(ag.lq.forward(x))[:, 0]
        target = ag.v.value(batch["s1"])  # V is frozen for this update
        err = pred - target
        grads, _ = ag.lq.gradients(x, (2.0 * err / n)[:, None])
        nn.adam_step(self.adam_lq, ag.lq.params(), grads)
        return float(np.mean(err**2))

    def train_pi(self, batch):
        ag, cfg = self.agent, self.cfg
        s = envs.featurize(ag.kind, batch["s"])
        n = s.shape[0]
        a = np.atleast_2d(ag.pi.forward(s))
        x = np.hstack([s, a])
        na = a.shape[1]
        ones = np.ones((n, 1))
        gq = ag.q_t.input_gradients(x, -ones / n)[:, -na:]
        gl = ag.lq_t.input_gradients(x, cfg.alpha * ones / n)[:, -na:]
        grads, _ = ag.pi.gradients(s, gq + gl)
        nn.adam_step(self.adam_pi, ag.pi.params(), grads)
        qv = np.atleast_2d(ag.q_t.forward(x))[:, 0]
        lv = np.atleast_2d(ag.lq_t.forward(x))[:, 0]
        return float(np.mean(-qv + cfg.alpha * lv))

    def polyak(self):
        tau = self.cfg.tau
        nn.polyak_update(self.agent.pi_t, self.agent.pi, tau)
        nn.polyak_update(self.agent.q_t, self.agent.q, tau)
        nn.polyak_update(self.agent.lq_t, self.agent.lq, tau)


def sample_goal(cfg, rng):
    """Uniform goal in an annulus around the arena origin."""
    r = np.sqrt(rng.uniform(cfg.goal_min**2, cfg.goal_range**2))
    phi = rng.uniform(0.0, 2 * np.pi)
    return r * np.array([np.cos(phi), np.sin(phi)])


def collect_episode(kind, policy, cfg, rng, goal=None, random_actions=False, noise=None):
    """Roll out the (target) policy with Gaussian exploration noise.

    Returns (transitions, episode_reward, start_distance). The arena is
    hazard-free; the episode ends at the horizon or when the goal is reached.
    """
    if goal is None:
        goal = sample_goal(cfg, rng)
    state = envs.initial_state(kind, heading=rng.uniform(0.0, 2 * np.pi))
    transitions = []
    total = 0.0
    d0 = float(np.linalg.norm(goal - state.pos))
    na = envs.action_dim(kind)
    if noise is None:
        noise = cfg.noise
    states = [state]
    for _ in range(cfg.horizon):
        sg = envs.goal_condition(state, goal)
        if random_actions:
            a = rng.uniform(-1.0, 1.0, size=na)
        else:
            a = policy.forward(sg)
            if noise > 0.0:
                a = a + rng.normal(0.0, noise, size=a.shape)
        a = np.clip(a, -1.0, 1.0)
        nxt = envs.step(kind, state, a)
        r = envs.reward(goal, state, nxt)
        sg1 = envs.goal_condition(nxt, goal)
        done = np.linalg.norm(goal - nxt.pos) < cfg.reach_tol
        transitions.append((sg, a, r, sg1, done))
        states.append(nxt)
        total += r
        state = nxt
        if done:
            break
    return transitions, total, d0, states


def store_episode(buffer, transitions, states, cfg, rng):
    """Push an episode into the replay, plus hindsight-relabeled copies.

    Relabeling substitutes a future achieved position for the goal and
    recomputes reward and termination; the (state, action, next-state)
    dynamics triple is unchanged.
    """
    for tr in transitions:
        buffer.add(*tr)
    n = len(transitions)
    for t in range(n):
        s_t, s_t1 = states[t], states[t + 1]
        a = transitions[t][1]
        for _ in range(cfg.hindsight_relabels):
            future = rng.integers(t, n)
            g = states[future + 1].pos
            sg = envs.goal_condition(s_t, g)
            sg1 = envs.goal_condition(s_t1, g)
            r = envs.reward(g, s_t, s_t1)
            done = np.linalg.norm(g - s_t1.pos) < cfg.reach_tol
            buffer.add(sg, a, r, sg1, done)


def colearn(kind, cfg=None, seed=0, log_path=None):
    """Run the full co-learning loop and return the trained agent.

    Per episode: collect transitions with the target policy, then cfg.grad_steps
    phases of (Q update, V and LQ updates, actor update, Polyak averaging).
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    agent = make_agent(kind, cfg.hidden, seed=seed)
    trainer = Trainer(agent, cfg)
    buffer = ReplayBuffer(cfg.replay_capacity, envs.state_dim(kind), envs.action_dim(kind))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    log_rows = []
    for ep in range(cfg.episodes):
        noise = cfg.noise
        if cfg.noise_final is not None and cfg.episodes > 1:
            frac = ep / (cfg.episodes - 1)
            noise = cfg.noise + frac * (cfg.noise_final - cfg.noise)
        transitions, ep_reward, d0, states = collect_episode(
            kind, agent.target_policy, cfg, rng, random_actions=ep < cfg.warmup_episodes, noise=noise
        )
        store_episode(buffer, transitions, states, cfg, rng)
        losses = np.zeros(4)
        phases = 0
        if buffer.size >= cfg.batch_size:
            for _ in range(cfg.grad_steps):
                batch = buffer.sample(rng, cfg.batch_size)
                ql = trainer.train_q(batch)
                vl = trainer.train_v(batch)
                ll = trainer.train_lq(batch)
                pl = trainer.train_pi(batch)
                trainer.polyak()
                losses += (ql, vl, ll, pl)
                phases += 1
            losses /= phases
        for net, name in ((agent.pi, "pi"), (agent.q, "q"), (agent.v.net, "v"), (agent.lq, "lq")):
            nn.check_finite(net, f"in {name} after episode {ep}")
        log_rows.append(
            {
                "episode": ep,
                "mean_reward": ep_reward,
                "q_loss": losses[0],
                "lyapunov_risk": losses[1],
                "lq_loss": losses[2],
                "policy_loss": losses[3],
                "start_distance": d0,
                "reached": int(transitions[-1][4]),
            }
        )
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(
                f,
                fieldnames=[
                    "episode",
                    "mean_reward",
                    "q_loss",
                    "lyapunov_risk",
                    "lq_loss",
                    "policy_loss",
                    "start_distance",
                    "reached",
                ],
            )
            writer.writeheader()
            writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in log_rows)
    return agent, log_rows
