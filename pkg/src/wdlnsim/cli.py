"""Command line: ``simulate``, ``oracle`` and ``report``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import WdlnError
from .harness import emit_outputs, report, run_experiment
from .oracle import SmallInstance, solve
from .schedulers import SCHEDULER_NAMES


def _simulate(args):
    cfg = load_config(args.config)
    changes = {}
    if args.scheduler:
        changes["schedulers"] = tuple(args.scheduler)
    for key in ("rounds", "instances"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if changes:
        cfg = cfg.replace(**changes)
    out = args.out or cfg.out_dir
    if out is None:
        raise WdlnError("no output directory: pass --out or set experiment.out_dir")
    summary, results = run_experiment(cfg)
    emit_outputs(results, summary, out)
    for name in cfg.schedulers:
        F = summary.metrics[name]["F"]["mean"]
        tail = float(np.mean(F[-min(500, len(F)):])) if len(F) else float("nan")
        print(f"{name:9s} mean F over final rounds: {tail:.4f}")
    return 0


def _oracle(args):
    cfg = load_config(args.config)
    oc = cfg.oracle
    inst = SmallInstance(distances_km=cfg.distances_km, rates=cfg.rates, W=cfg.W, gain_bins=oc.gain_bins,
                         n_max=oc.n_max, m_max=oc.m_max, gamma=cfg.gamma, packet_bits=cfg.channel.packet_bits,
                         tx_power_dbm=cfg.channel.tx_power_dbm, noise_power_dbm=cfg.channel.noise_power_dbm,
                         ber_model=cfg.channel.ber_model)
    model, sol, rep = solve(inst, oc.tol, oc.max_iter)
    U = inst.U
    table = [{"gain_bins": st[:U].tolist(), "n": st[U:].tolist(),
              "action": list(model.actions[sol.policy[s]]), "v": float(sol.v[s])}
             for s, st in enumerate(model.states)]
    doc = {
        "J_star": rep.J_star,
        "J_star_unnormalized": float(model.unnormalize(rep.J_star)),
        "J_greedy": rep.J_greedy,
        "greedy_gap": rep.greedy_gap,
        "iterations": rep.iterations,
        "bellman_residual": rep.residual,
        "num_states": model.num_states,
        "num_actions": model.num_actions,
        "policy": table,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"J* = {rep.J_star:.10f}  greedy = {rep.J_greedy:.10f}  gap = {rep.greedy_gap:.3e}")
    return 0


def _report(args):
    summary = report(args.inp, args.out)
    print(f"re-aggregated {summary.instances} instance(s) of {len(summary.metrics)} scheduler(s) into {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="wdlnsim", description="Wireless asynchronous FL scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a seeded multi-instance experiment")
    sim.add_argument("--config", required=True)
    sim.add_argument("--scheduler", action="append", choices=SCHEDULER_NAMES,
                     help="scheduler to run; repeat for several (default: from config)")
    sim.add_argument("--rounds", type=int)
    sim.add_argument("--instances", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out")
    sim.set_defaults(func=_simulate)

    orc = sub.add_parser("oracle", help="solve a small instance exactly")
    orc.add_argument("--config", required=True)
    orc.add_argument("--out", required=True)
    orc.set_defaults(func=_oracle)

    rep = sub.add_parser("report", help="re-aggregate per-instance CSVs")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WdlnError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
