"""Session fixtures: trained agents, baselines, and lookup tables.

Training is expensive, so every artifact is cached on disk under
tests/_agent_cache/ together with its wall-clock build time; delete that
directory to retrain from scratch. Seeds and budgets are frozen here — the
acceptance suite runs against exactly these artifacts.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from lyapnav import colearn, harness, lyapunov_eval, monitor, nn
from lyapnav.envs import RobotKind

CACHE = Path(__file__).parent / "_agent_cache"

TRAIN_SPECS = {
    RobotKind.SWEEPING: {"seed": 0, "episodes": 200},
    RobotKind.POINT: {"seed": 3, "episodes": 400},
    RobotKind.CAR: {"seed": 1, "episodes": 500},
}

E2E_SPECS = {
    RobotKind.SWEEPING: {"seed": 0, "episodes": 150},
    RobotKind.POINT: {"seed": 0, "episodes": 150},
    RobotKind.CAR: {"seed": 0, "episodes": 150},
}


def train_config(kind):
    spec = TRAIN_SPECS[kind]
    return colearn.TrainConfig(episodes=spec["episodes"], gamma=0.97, noise=0.15)


def _cached_agent(kind):
    d = CACHE / kind.value
    meta_path = d / "train_meta.json"
    if meta_path.exists():
        with open(meta_path) as f:
            meta = json.load(f)
        return colearn.Agent.load(d), meta
    spec = TRAIN_SPECS[kind]
    t0 = time.time()
    agent, log_rows = colearn.colearn(kind, train_config(kind), seed=spec["seed"])
    seconds = time.time() - t0
    d.mkdir(parents=True, exist_ok=True)
    agent.save(d)
    meta = {
        "seed": spec["seed"],
        "episodes": spec["episodes"],
        "train_seconds": seconds,
        "episode_rewards": [r["mean_reward"] for r in log_rows],
        "start_distances": [r["start_distance"] for r in log_rows],
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f)
    return agent, meta


def _cached_lut(kind, agent):
    path = CACHE / f"{kind.value}_lut.json"
    if path.exists():
        return monitor.RoaLut.from_json(path.read_text())
    S, _ = lyapunov_eval.sample_transitions(kind, agent.policy, 2000, seed=5)
    grid = monitor.level_grid_from_values(agent.v.value(S))
    box = monitor.state_box(kind, 3.0)
    lut = monitor.build_lut(
        agent.v.value,
        agent.v.grad,
        grid,
        box,
        seed=3,
        v_digest=nn.params_digest(agent.v.net),
        project=monitor.heading_projection(kind),
    )
    CACHE.mkdir(parents=True, exist_ok=True)
    path.write_text(lut.to_json())
    return lut


def _cached_e2e(kind):
    d = CACHE / f"{kind.value}_e2e"
    if (d / "manifest.json").exists():
        return harness.E2ePolicy.load(d)
    spec = E2E_SPECS[kind]
    policy = harness.train_e2e(kind, harness.E2eTrainConfig(episodes=spec["episodes"]), seed=spec["seed"])
    policy.save(d)
    return policy


@pytest.fixture(scope="session")
def sweeping_trained():
    return _cached_agent(RobotKind.SWEEPING)


@pytest.fixture(scope="session")
def sweeping_agent(sweeping_trained):
    return sweeping_trained[0]


@pytest.fixture(scope="session")
def point_agent():
    return _cached_agent(RobotKind.POINT)[0]


@pytest.fixture(scope="session")
def car_agent():
    return _cached_agent(RobotKind.CAR)[0]


@pytest.fixture(scope="session")
def sweeping_lut(sweeping_agent):
    return _cached_lut(RobotKind.SWEEPING, sweeping_agent)


@pytest.fixture(scope="session")
def point_lut(point_agent):
    return _cached_lut(RobotKind.POINT, point_agent)


@pytest.fixture(scope="session")
def car_lut(car_agent):
    return _cached_lut(RobotKind.CAR, car_agent)


@pytest.fixture(scope="session")
def sweeping_e2e():
    return _cached_e2e(RobotKind.SWEEPING)


@pytest.fixture(scope="session")
def point_e2e():
    return _cached_e2e(RobotKind.POINT)


@pytest.fixture(scope="session")
def car_e2e():
    return _cached_e2e(RobotKind.CAR)
