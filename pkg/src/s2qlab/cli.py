"""Command-line entry points.

    s2qlab run --config cfg.json [--seed N] [--out dir]
    s2qlab dump-qtable --ckpt run/checkpoint.npz [--out table.csv]
    s2qlab heatmap --ckpt run/checkpoint.npz --temperature T --epsilon E [--out csv]
    s2qlab verify-theorem --instances N --agents 2 --actions 4 --k 2 [--alpha X]

Exit status is nonzero whenever any error branch fires.
"""

import argparse
import dataclasses
import json
import sys

import numpy as np

from s2qlab import oracle
from s2qlab.behavior import (behavior_mixture_table, per_agent_eps_greedy_table,
                             softmax_p)
from s2qlab.config import load_config
from s2qlab.envs import unflatten_action
from s2qlab.errors import ConfigError, LoadError, NumericalError, UsageError
from s2qlab.learner import TabularTrainer
from s2qlab.runner import load_checkpoint, run, state_probe_windows
from s2qlab.valuenets import critic_table, sub_value_table


def _write_csv(lines, out_path):
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run(cfg, out_dir=args.out)
    print(json.dumps(result.summary, indent=1, sort_keys=True))
    print(f"outputs written to {result.out_dir}")
    return 0


def qtable_rows(cfg, trainer, bundle):
    """(function, state, flat_action, value) over all nonterminal states.

    Partially observed utilities are evaluated at zero-history windows,
    so the table is the exact first-step value surface.
    """
    spec = bundle.spec_pre
    rows = []
    if isinstance(trainer, TabularTrainer):
        for s in range(spec.n_states):
            if spec.absorbing[s]:
                continue
            for j in range(spec.n_joint_actions):
                rows.append(("qstar", s, j, float(trainer.q_star[s, j])))
            for k in range(trainer.K + 1):
                for j in range(spec.n_joint_actions):
                    rows.append((f"sub{k}", s, j, float(trainer.q_sub[k, s, j])))
        return rows
    for s in range(spec.n_states):
        if spec.absorbing[s]:
            continue
        windows = trainer._augment(state_probe_windows(spec, s, cfg.history_window))
        feat = spec.state_features(s)
        if trainer.critic is not None:
            table = critic_table(trainer.critic, feat)
            for j, v in enumerate(table):
                rows.append(("qstar", s, j, float(v)))
        for k in range(trainer.K + 1):
            table = sub_value_table(trainer.ensemble, k, windows, feat)
            for j, v in enumerate(table):
                rows.append((f"sub{k}", s, j, float(v)))
    return rows


def cmd_dump_qtable(args) -> int:
    cfg, trainer, bundle = load_checkpoint(args.ckpt)
    lines = ["function,state,flat_action,value"]
    for fn, s, j, v in qtable_rows(cfg, trainer, bundle):
        lines.append(f"{fn},{s},{j},{v!r}")
    _write_csv(lines, args.out)
    return 0


def heatmap_rows(cfg, trainer, bundle, temperature, epsilon):
    """Exact joint-action probabilities of the softmax-coordinated behavior
    and of plain per-agent epsilon-greedy at 0.05, at the canonical state."""
    spec = bundle.spec_pre
    s = int(np.argmax(spec.initial_state_dist > 0))
    if isinstance(trainer, TabularTrainer):
        tracked, qvals = trainer.tracked_probe_state(s)
    else:
        windows = state_probe_windows(spec, s, cfg.history_window)
        tracked, qvals = trainer.tracked_probe(windows, spec.state_features(s))
    probs = softmax_p(qvals, temperature).probs
    mixture = behavior_mixture_table(probs, tracked.flats, epsilon,
                                     spec.n_agents, spec.n_actions)
    baseline = per_agent_eps_greedy_table(tracked.flats[0], 0.05,
                                          spec.n_agents, spec.n_actions)
    rows = []
    for j in range(spec.n_joint_actions):
        acts = unflatten_action(j, spec.n_actions, spec.n_agents)
        rows.append((j, acts, float(mixture[j]), float(baseline[j])))
    return rows


def cmd_heatmap(args) -> int:
    cfg, trainer, bundle = load_checkpoint(args.ckpt)
    rows = heatmap_rows(cfg, trainer, bundle, args.temperature, args.epsilon)
    n_agents = bundle.spec_pre.n_agents
    header = "flat_action," + ",".join(f"a{i}" for i in range(n_agents)) + \
        ",prob_mixture,prob_eps_greedy"
    lines = [header]
    for j, acts, pm, pe in rows:
        lines.append(f"{j}," + ",".join(str(a) for a in acts) + f",{pm!r},{pe!r}")
    _write_csv(lines, args.out)
    return 0


def theorem_sweep(n_instances: int, n_agents: int, n_actions: int, K: int,
                  floor_c: float, seed: int, alpha: float = None,
                  margin: float = 0.01) -> dict:
    """Random tie-free payoff instances through the fixed-point verifier."""
    children = np.random.SeedSequence(seed).spawn(n_instances)
    J = n_actions ** n_agents
    instances = []
    n_pass = 0
    worst_margin = None
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        row = rng.uniform(-10.0, 10.0, J)
        while len(np.unique(row)) < J:
            row = rng.uniform(-10.0, 10.0, J)
        bound = oracle.alpha_bound(row, K, floor_c)
        alpha_used = alpha if alpha is not None else bound.overall + margin
        report = oracle.verify_theorem(row, K, alpha_used, floor_c)
        n_pass += int(report.passed)
        inst_margin = alpha_used - bound.overall
        if worst_margin is None or inst_margin < worst_margin:
            worst_margin = inst_margin
        instances.append({
            "seed": i,
            "bound": bound.overall,
            "alpha": alpha_used,
            "pass_per_k": report.per_k,
            "passed": report.passed,
            "witness": {str(k): w for k, w in report.witness.items()},
        })
    return {
        "n_instances": n_instances,
        "n_agents": n_agents,
        "n_actions": n_actions,
        "K": K,
        "floor_c": floor_c,
        "seed": seed,
        "alpha_fixed": alpha,
        "margin": margin,
        "pass_rate": n_pass / n_instances,
        "worst_margin": worst_margin,
        "instances": instances,
    }


def cmd_verify_theorem(args) -> int:
    if min(args.instances, args.agents, args.actions) <= 0 or args.k < 0:
        raise UsageError("instances/agents/actions must be positive, k >= 0")
    report = theorem_sweep(args.instances, args.agents, args.actions, args.k,
                           args.c, args.seed, alpha=args.alpha)
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(f"pass_rate={report['pass_rate']} worst_margin={report['worst_margin']}")
    return 0 if report["pass_rate"] == 1.0 or args.alpha is not None else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2qlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one seeded configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("dump-qtable", help="exhaustive joint value tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dump_qtable)

    p = sub.add_parser("heatmap", help="exact behavior-policy action table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--temperature", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("verify-theorem", help="random-instance fixed-point check")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--actions", type=int, default=4)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--c", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_verify_theorem)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (LoadError, UsageError, ConfigError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
