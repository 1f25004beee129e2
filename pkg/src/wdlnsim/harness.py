"""Seeded multi-instance experiments, summary statistics and file outputs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .channel import ChannelBank
from .config import ExperimentConfig
from .engine import Environment, World, run
from .learner import SoftmaxRegression, SyntheticTask
from .rng import GLOBAL, stream
from .schedulers import make_scheduler

CSV_HEADER = ["round", "scheduler", "instance", "F", "cum_reward", "regret", "loss", "accuracy",
              "n_total", "stragglers"]
LONG_HEADER = ["scheduler", "round", "metric", "mean", "ci_lo", "ci_hi"]
METRICS = ("F", "cum_reward", "regret", "loss", "accuracy", "n_total", "stragglers")
REGRET_REFERENCE = "alsa-pi"


@dataclass
class InstanceResult:
    """Per-round series of one (scheduler, instance) run."""

    scheduler: str
    instance: int
    F: np.ndarray
    cum_reward: np.ndarray
    n_total: np.ndarray
    stragglers: np.ndarray
    loss: np.ndarray          # NaN where no snapshot was taken
    accuracy: np.ndarray
    regret: np.ndarray | None = None
    scheduler_state: object = field(default=None, repr=False, compare=False)

    @property
    def rounds(self):
        return len(self.F)


def build_world(cfg: ExperimentConfig, instance: int) -> World:
    task = SyntheticTask(cfg.task)
    env = Environment(cfg.rates, cfg.base_seed, instance, m_max=cfg.m_max, task=task, shard_size=cfg.shard_size)
    channel = ChannelBank(cfg.distances_km, cfg.channel.tx_power_dbm, cfg.channel.noise_power_dbm,
                          cfg.channel.packet_bits, cfg.channel.model())
    learner = test_set = probe_set = None
    if cfg.learner_enabled:
        learner = SoftmaxRegression(task)
        test_set = task.sample(cfg.task.test_set_size, stream(cfg.base_seed, instance, GLOBAL, "test"))
        probe_set = task.sample(cfg.task.probe_set_size, stream(cfg.base_seed, instance, GLOBAL, "probe"))
    return World(channel, cfg.rates, cfg.W, gamma=cfg.gamma, hyper=cfg.fl, env=env, learner=learner,
                 test_set=test_set, probe_set=probe_set, snapshot_every=cfg.snapshot_every)


def run_instance(cfg: ExperimentConfig, scheduler_name: str, instance: int, keep_records: bool = False):
    """One seeded run; returns :class:`InstanceResult` (and the raw records if asked)."""
    world = build_world(cfg, instance)
    sched = make_scheduler(scheduler_name, true_rates=cfg.rates, options=cfg.scheduler_options)
    rng = stream(cfg.base_seed, instance, GLOBAL, "scheduler")
    records = run(world, sched, cfg.rounds, rng)
    nan = float("nan")
    res = InstanceResult(
        scheduler=scheduler_name,
        instance=instance,
        F=np.array([r.F for r in records], dtype=float),
        cum_reward=np.array([r.cum_reward for r in records], dtype=float),
        n_total=np.array([r.n_total for r in records], dtype=float),
        stragglers=np.array([r.stragglers for r in records], dtype=float),
        loss=np.array([nan if r.loss is None else r.loss for r in records], dtype=float),
        accuracy=np.array([nan if r.accuracy is None else r.accuracy for r in records], dtype=float),
        scheduler_state=sched,
    )
    return (res, records) if keep_records else res


def compute_required_rounds(accuracy_series, target: float):
    """First 1-based index where three consecutive entries all exceed ``target``.

    ``None`` when that never happens. A target of 0 is treated as met from the
    first round on.
    """
    acc = np.asarray(accuracy_series, dtype=float)
    if acc.size == 0:
        raise ValueError("accuracy series must be nonempty")
    if target <= 0:
        return 1
    above = acc > target
    for i in range(len(acc) - 2):
        if above[i] and above[i + 1] and above[i + 2]:
            return i + 1
    return None


def compute_regret(reward_series, J_star: float) -> np.ndarray:
    """``R(t) = t J* - sum_{tau <= t} r^tau``."""
    r = np.asarray(reward_series, dtype=float)
    return J_star * np.arange(1, len(r) + 1) - np.cumsum(r)


def mean_ci(samples, level: float = 0.95):
    """Column means of ``samples`` (instances x rounds) with Student-t bounds.

    NaN entries are ignored; a column with fewer than two values gets a
    zero-width interval.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    ok = ~np.isnan(x)
    k = ok.sum(axis=0)
    filled = np.where(ok, x, 0.0)
    mean = np.where(k > 0, filled.sum(axis=0) / np.maximum(k, 1), np.nan)
    dev = np.where(ok, x - mean, 0.0)
    var = (dev * dev).sum(axis=0) / np.maximum(k - 1, 1)
    crit = stats.t.ppf(0.5 + level / 2, np.maximum(k - 1, 1))
    half = np.where(k > 1, crit * np.sqrt(var / np.maximum(k, 1)), 0.0)
    return mean, mean - half, mean + half


@dataclass
class RunSummary:
    """Per-scheduler per-round mean and 95% CI plus target statistics."""

    rounds: int
    instances: int
    metrics: dict            # scheduler -> metric -> {"mean", "ci_lo", "ci_hi"} arrays
    satisfaction_rate: dict  # scheduler -> target -> fraction of instances
    required_rounds: dict    # scheduler -> target -> mean required round or None
    regret_reference: str | None

    def to_json(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "rounds": self.rounds,
            "instances": self.instances,
            "regret_reference": self.regret_reference,
            "satisfaction_rate": self.satisfaction_rate,
            "required_rounds": self.required_rounds,
            "metrics": {s: {m: {k: clean(v) for k, v in d.items()} for m, d in md.items()}
                        for s, md in self.metrics.items()},
        }


def attach_regret(results: list[InstanceResult]):
    """Regret against the ALSA-PI per-instance mean reward, a proxy for J*.

    Leaves ``regret`` as ``None`` when ALSA-PI was not run.
    """
    ref = {r.instance: float(np.mean(r.F)) for r in results if r.scheduler == REGRET_REFERENCE and r.rounds}
    if not ref:
        return None
    for r in results:
        if r.instance in ref:
            r.regret = compute_regret(r.F, ref[r.instance])
    return f"{REGRET_REFERENCE} empirical mean (proxy for J*)"


def _snapshot_rounds(accuracy):
    return np.flatnonzero(~np.isnan(accuracy)) + 1


def summarize(results: list[InstanceResult], rounds: int, targets=()) -> RunSummary:
    by_sched: dict[str, list[InstanceResult]] = {}
    for r in sorted(results, key=lambda r: (r.scheduler, r.instance)):
        by_sched.setdefault(r.scheduler, []).append(r)
    metrics, sat, req = {}, {}, {}
    for name, runs in by_sched.items():
        md = {}
        for m in METRICS:
            series = [getattr(r, m) for r in runs]
            if any(s is None for s in series):
                continue
            arr = np.vstack(series) if rounds else np.zeros((len(runs), 0))
            mean, lo, hi = mean_ci(arr)
            md[m] = {"mean": mean, "ci_lo": lo, "ci_hi": hi}
        metrics[name] = md
        sat[name], req[name] = {}, {}
        for target in targets:
            hits = []
            for r in runs:
                snap = _snapshot_rounds(r.accuracy)
                idx = compute_required_rounds(r.accuracy[snap - 1], target) if len(snap) else None
                hits.append(None if idx is None else int(snap[idx - 1]))
            ok = [h for h in hits if h is not None]
            key = repr(float(target))
            sat[name][key] = len(ok) / len(runs)
            req[name][key] = float(np.mean(ok)) if ok else None
    return RunSummary(rounds, len({r.instance for r in results}), metrics, sat, req, None)


def run_experiment(cfg: ExperimentConfig, schedulers=None, progress=None):
    """All (scheduler, instance) runs in index order; returns ``(summary, results)``."""
    names = tuple(schedulers or cfg.schedulers)
    results = []
    for name in names:
        for i in range(cfg.instances):
            results.append(run_instance(cfg, name, i))
            if progress is not None:
                progress(name, i)
    ref = attach_regret(results)
    summary = summarize(results, cfg.rounds, cfg.targets)
    summary.regret_reference = ref
    return summary, results


def _fmt(v):
    if v is None:
        return ""
    v = float(v)
    if np.isnan(v):
        return ""
    return repr(v)


def write_instance_csv(res: InstanceResult, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in range(res.rounds):
            regret = None if res.regret is None else res.regret[t]
            w.writerow([t + 1, res.scheduler, res.instance, _fmt(res.F[t]), _fmt(res.cum_reward[t]), _fmt(regret),
                        _fmt(res.loss[t]), _fmt(res.accuracy[t]), int(res.n_total[t]), int(res.stragglers[t])])


def emit_outputs(results: list[InstanceResult], summary: RunSummary, out_dir) -> dict:
    """Write per-instance CSVs, ``summary.json`` and ``summary_long.csv``."""
    out = Path(out_dir)
    try:
        (out / "instances").mkdir(parents=True, exist_ok=True)
        paths = {"instances": []}
        for res in sorted(results, key=lambda r: (r.scheduler, r.instance)):
            p = out / "instances" / f"{res.scheduler}_{res.instance:03d}.csv"
            write_instance_csv(res, p)
            paths["instances"].append(p)
        paths["summary"] = out / "summary.json"
        paths["summary"].write_text(json.dumps(summary.to_json(), indent=1, sort_keys=True) + "\n")
        paths["long"] = out / "summary_long.csv"
        with open(paths["long"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LONG_HEADER)
            for name in sorted(summary.metrics):
                for metric, d in summary.metrics[name].items():
                    for t in range(summary.rounds):
                        if np.isnan(d["mean"][t]):
                            continue
                        w.writerow([name, t + 1, metric, _fmt(d["mean"][t]), _fmt(d["ci_lo"][t]), _fmt(d["ci_hi"][t])])
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc
    return paths


def read_instance_csvs(in_dir) -> list[InstanceResult]:
    """Load per-instance CSVs written by :func:`emit_outputs`."""
    files = sorted((Path(in_dir) / "instances").glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no per-instance CSVs under {Path(in_dir) / 'instances'}")
    out = []
    for p in files:
        with open(p, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            sched, inst = rows[0]["scheduler"], int(rows[0]["instance"])
        else:
            stem = p.stem
            sched, inst = stem.rsplit("_", 1)[0], int(stem.rsplit("_", 1)[1])

        def col(key):
            return np.array([float(r[key]) if r[key] != "" else np.nan for r in rows], dtype=float)

        regret = col("regret")
        out.append(InstanceResult(sched, inst, col("F"), col("cum_reward"), col("n_total"), col("stragglers"),
                                  col("loss"), col("accuracy"),
                                  regret=None if rows and np.all(np.isnan(regret)) else regret))
    return out


def report(in_dir, out_dir, targets=()) -> RunSummary:
    """Re-aggregate per-instance CSVs into fresh summary files."""
    results = read_instance_csvs(in_dir)
    rounds = results[0].rounds
    summary = summarize(results, rounds, targets)
    old = Path(in_dir) / "summary.json"
    if old.exists():
        summary.regret_reference = json.loads(old.read_text()).get("regret_reference")
    emit_outputs(results, summary, out_dir)
    return summary


def tail_mean(series, fraction: float | None = None, last: int | None = None) -> float:
    """Mean over the final ``last`` rounds or final ``fraction`` of rounds."""
    s = np.asarray(series, dtype=float)
    k = last if last is not None else max(1, int(round(len(s) * fraction)))
    return float(np.mean(s[-k:]))


def count_loss_spikes(loss_series, window: int = 10, jump: float = 0.5) -> int:
    """Snapshots whose loss exceeds the trailing median of ``window`` snapshots by more than ``jump``."""
    s = np.asarray(loss_series, dtype=float)
    s = s[~np.isnan(s)]
    count = 0
    for i in range(1, len(s)):
        med = np.median(s[max(0, i - window):i])
        if s[i] > (1.0 + jump) * med:
            count += 1
    return count
