"""Command-line interface.

Subcommands cover the full pipeline: train the co-learning agent, train the
end-to-end baseline, score the learned Lyapunov function, precompute the
certificate lookup table, plan paths, run benchmarks, and re-render reports.

Every dataclass default can be overridden from a single JSON config file with
top-level sections {"train", "e2e", "planner", "monitor", "search", "lut"}.
The LYAPNAV_SEED environment variable overrides every --seed argument.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import colearn, envs, harness, lyapunov_eval, monitor, nn, planner
from .envs import RobotKind


def load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def apply_overrides(obj, overrides):
    """Dataclass copy with config-file overrides; unknown keys are errors."""
    if not overrides:
        return obj
    known = {f.name for f in fields(obj)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config keys for {type(obj).__name__}: {sorted(unknown)}")
    clean = {k: tuple(v) if isinstance(getattr(obj, k), tuple) else v for k, v in overrides.items()}
    return replace(obj, **clean)


def resolve_seed(args):
    env = os.environ.get("LYAPNAV_SEED")
    return int(env) if env else args.seed


def cmd_train(args):
    cfg = apply_overrides(colearn.TrainConfig(), load_config(args.config).get("train"))
    seed = resolve_seed(args)
    os.makedirs(args.out, exist_ok=True)
    agent, _ = colearn.colearn(RobotKind(args.robot), cfg, seed=seed, log_path=os.path.join(args.out, "train_log.csv"))
    agent.save(args.out)
    print(f"trained {args.robot} agent (seed {seed}) -> {args.out}")
    return 0


def cmd_train_e2e(args):
    cfg = apply_overrides(harness.E2eTrainConfig(), load_config(args.config).get("e2e"))
    seed = resolve_seed(args)
    policy = harness.train_e2e(RobotKind(args.robot), cfg, seed=seed)
    policy.save(args.out)
    print(f"trained {args.robot} e2e baseline (seed {seed}) -> {args.out}")
    return 0


def cmd_eval_nlf(args):
    agent = colearn.Agent.load(args.agent)
    report = lyapunov_eval.evaluate(agent, n=args.n, seed=resolve_seed(args))
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.to_json())
    print(report.table_row(agent.kind.value))
    return 0


def cmd_build_lut(args):
    doc = load_config(args.config)
    agent = colearn.Agent.load(args.agent)
    seed = resolve_seed(args)
    search = apply_overrides(monitor.SearchConfig(), doc.get("search"))
    lut_opts = doc.get("lut", {})
    n_keys = int(lut_opts.get("n_keys", 32))
    lo_pct = float(lut_opts.get("lo_pct", 0.1))
    hi_pct = float(lut_opts.get("hi_pct", 99.0))
    reach = float(lut_opts.get("reach", args.reach))
    S, _ = lyapunov_eval.sample_transitions(agent.kind, agent.policy, args.n_samples, seed=seed)
    grid = monitor.level_grid_from_values(agent.v.value(S), n_keys, lo_pct, hi_pct)
    box = monitor.state_box(agent.kind, reach)
    lut = monitor.build_lut(
        agent.v.value,
        agent.v.grad,
        grid,
        box,
        search,
        seed=seed,
        v_digest=nn.params_digest(agent.v.net),
        project=monitor.heading_projection(agent.kind),
    )
    with open(args.out, "w") as f:
        f.write(lut.to_json())
    print(f"lookup table with {lut.keys.size} levels, radii [{lut.radii[0]:.3f}, {lut.radii[-1]:.3f}] -> {args.out}")
    return 0


def cmd_plan(args):
    seed = resolve_seed(args)
    if args.world:
        with open(args.world) as f:
            world = envs.World.from_json(f.read())
    else:
        world = envs.make_world(args.level, seed)
    cfg = apply_overrides(planner.PlannerConfig.for_world(world), load_config(args.config).get("planner"))
    try:
        path = planner.plan_path(world, cfg, seed)
    except planner.PlanNotFound as exc:
        print(f"plan failed: {exc}", file=sys.stderr)
        return 1
    with open(args.out, "w") as f:
        f.write(planner.path_to_json(path, cfg, seed))
    print(f"path with {len(path)} waypoints -> {args.out}")
    return 0


def cmd_bench(args):
    doc = load_config(args.config)
    seed = resolve_seed(args)
    method = args.method
    if method in ("monitored", "direct"):
        agent = colearn.Agent.load(args.agent)
    else:
        agent = harness.E2ePolicy.load(args.agent)
    lut = None
    if method == "monitored":
        if not args.lut:
            print("bench --method monitored needs --lut", file=sys.stderr)
            return 1
        with open(args.lut) as f:
            lut = monitor.RoaLut.from_json(f.read())
    mon_cfg = apply_overrides(monitor.MonitorConfig(), doc.get("monitor"))
    summary, episodes = harness.run_benchmark(method, agent, args.level, args.episodes, seed, lut=lut, config=mon_cfg)
    harness.write_reports([summary], episodes, args.out)
    print(harness.render_table([summary]))
    return 0


def cmd_report(args):
    with open(os.path.join(args.results, "episodes.csv")) as f:
        rows = list(csv.DictReader(f))
    episodes = [
        harness.EpisodeReport(
            r["method"], r["robot"], int(r["level"]), int(r["world_seed"]), r["outcome"], int(r["steps"])
        )
        for r in rows
    ]
    groups = {}
    for e in episodes:
        groups.setdefault((e.robot, e.level, e.method), []).append(e)
    summaries = [harness.summarize(g) for g in groups.values()]
    harness.write_reports(summaries, episodes, args.results)
    print(harness.render_table(summaries))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lyapnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    robots = [k.value for k in RobotKind]

    t = sub.add_parser("train", help="co-learn policy and Lyapunov networks")
    t.add_argument("--robot", choices=robots, required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    te = sub.add_parser("train-e2e", help="train the end-to-end baseline")
    te.add_argument("--robot", choices=robots, required=True)
    te.add_argument("--config")
    te.add_argument("--out", required=True)
    te.add_argument("--seed", type=int, default=0)
    te.set_defaults(fn=cmd_train_e2e)

    ev = sub.add_parser("eval-nlf", help="Lyapunov satisfaction-rate report")
    ev.add_argument("--agent", required=True)
    ev.add_argument("--n", type=int, default=10_000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval_nlf)

    bl = sub.add_parser("build-lut", help="precompute the level-to-radius table")
    bl.add_argument("--agent", required=True)
    bl.add_argument("--out", required=True)
    bl.add_argument("--config")
    bl.add_argument("--reach", type=float, default=3.0)
    bl.add_argument("--n-samples", type=int, default=2000)
    bl.add_argument("--seed", type=int, default=0)
    bl.set_defaults(fn=cmd_build_lut)

    pl = sub.add_parser("plan", help="plan a waypoint path through a world")
    pl.add_argument("--world", help="world JSON; omit to generate one")
    pl.add_argument("--level", type=int, default=1, choices=sorted(envs.LEVELS))
    pl.add_argument("--config")
    pl.add_argument("--out", required=True)
    pl.add_argument("--seed", type=int, default=0)
    pl.set_defaults(fn=cmd_plan)

    b = sub.add_parser("bench", help="run a multi-episode benchmark")
    b.add_argument("--method", choices=harness.METHODS, required=True)
    b.add_argument("--agent", required=True)
    b.add_argument("--lut")
    b.add_argument("--level", type=int, default=1, choices=sorted(envs.LEVELS))
    b.add_argument("--episodes", type=int, default=100)
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="re-render summary and table from episode CSV")
    r.add_argument("--results", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (
        FloatingPointError,
        nn.CheckpointError,
        planner.PlanNotFound,
        monitor.InfeasibleLevelError,
        envs.WorldGenerationError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
