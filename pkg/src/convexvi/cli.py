"""Benchmark harness: task x surrogate x seed sweeps with oracle checks.

Outputs per run directory:
  results.csv     one row per (task, surrogate, seed); deterministic,
                  so identical configs reproduce it bit-exactly
  timings.csv     wall times (kept out of results.csv on purpose)
  summary.csv     per-(task, surrogate) aggregates, best-of-task marked
  trajectory_<task>_<surrogate>_<seed>.csv
  meta.json       config echo and oracle provenance
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .inference import TrainConfig, elbo_estimate, fit, surrogate_moments
from .model import condition
from .oracles import ChainConfig, kalman_filter_smoother, metropolis_sample
from .surrogates import _BUILDERS
from .tasks import (
    SdeTaskConfig,
    TASK_IDS,
    brownian_chain_spec,
    generate_data,
    get_task,
    load_task_config,
)

SURROGATE_KINDS = tuple(sorted(_BUILDERS))
FINAL_ELBO_SAMPLES = 1000
MOMENT_SAMPLES = 4000

RESULT_COLUMNS = (
    "task",
    "surrogate",
    "seed",
    "final_neg_elbo",
    "mean_error",
    "sd_error",
    "oracle_reliable",
    "iterations",
    "converged",
    "failed",
)

USAGE = """\
usage: convexvi --task ID [options]

flags (last occurrence wins; --config applies its file at its position):
  --task ID          one of: br, brg, lz, lzg, es, radon
  --surrogate KINDS  comma-separated: asvi, mean-field, ar1, mvn (default asvi)
  --steps N          max optimization steps (default 30000, early stopping on)
  --lr X             learning rate (default per surrogate kind)
  --samples N        Monte-Carlo samples per gradient step (default 1)
  --seeds LIST       comma-separated integer seeds (default 1)
  --out DIR          output directory (default results)
  --config FILE      JSON file with any of the above keys
  --task-config FILE JSON overrides for SDE task defaults (steps, dt, ...)
  --workers N        parallel worker processes (default 1)
"""


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: str
    surrogates: tuple = ("asvi",)
    steps: int = 30000
    lr: float = None
    n_samples: int = 1
    seeds: tuple = (1,)
    out_dir: str = "results"
    task_overrides: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise UsageError(f"invalid task {self.task!r}; choose from {TASK_IDS}")
        for s in self.surrogates:
            if s not in SURROGATE_KINDS:
                raise UsageError(f"invalid surrogate {s!r}; choose from {SURROGATE_KINDS}")
        if not self.seeds:
            raise UsageError("need at least one seed")
        if self.steps < 0 or self.n_samples < 1 or self.workers < 1:
            raise UsageError("steps must be >= 0, samples and workers >= 1")


_FLAG_KEYS = {
    "task": "task",
    "surrogate": "surrogates",
    "steps": "steps",
    "lr": "lr",
    "samples": "n_samples",
    "seeds": "seeds",
    "out": "out_dir",
    "workers": "workers",
}


def _coerce(key, value):
    if key == "surrogates":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(value)
    if key == "seeds":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(int(v) for v in value)
    if key in ("steps", "n_samples", "workers"):
        return int(value)
    if key == "lr":
        return None if value is None else float(value)
    return str(value)


def parse_flags(argv) -> RunConfig:
    """Manual left-to-right scan so `--config file` obeys flags-last-wins."""
    settings = {}
    i = 0
    while i < len(argv):
        flag = argv[i]
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}\n{USAGE}")
        name = flag[2:]
        if i + 1 >= len(argv):
            raise UsageError(f"flag {flag} needs a value\n{USAGE}")
        value = argv[i + 1]
        i += 2
        if name == "config":
            try:
                with open(value) as fh:
                    data = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config file {value!r}: {exc}")
            for key, v in data.items():
                if key not in _FLAG_KEYS and key != "task_overrides":
                    raise UsageError(f"unknown config key {key!r}")
                if key == "task_overrides":
                    settings["task_overrides"] = dict(v)
                else:
                    settings[_FLAG_KEYS[key]] = _coerce(_FLAG_KEYS[key], v)
        elif name == "task-config":
            settings["task_overrides"] = load_task_config(value)
        elif name in _FLAG_KEYS:
            key = _FLAG_KEYS[name]
            try:
                settings[key] = _coerce(key, value)
            except ValueError as exc:
                raise UsageError(f"bad value for {flag}: {exc}")
        else:
            raise UsageError(f"unknown flag {flag}\n{USAGE}")
    if "task" not in settings:
        raise UsageError(f"--task is required\n{USAGE}")
    return RunConfig(**settings)


# ---------------------------------------------------------------------------
# one benchmark run


def _build_task(config: RunConfig):
    if config.task in ("br", "brg", "lz", "lzg") and config.task_overrides:
        base = {"steps": 30, "dt": 0.01 if config.task.startswith("br") else 0.02,
                "innovation_scale": 0.1,
                "obs_scale": 0.15 if config.task.startswith("br") else 1.0}
        base.update(config.task_overrides)
        return get_task(config.task, sde_config=SdeTaskConfig(**base))
    return get_task(config.task)


def _conditioned_model(task, seed):
    """Model plus the data it is conditioned on for this seed."""
    if task.is_pre_conditioned:
        return task.model, None
    observations, truth = generate_data(task, seed=seed)
    return condition(task.model, observations), truth


def _oracle_stats(task, model, seed):
    """Ground-truth latent means/SDs where an oracle exists."""
    if task.oracle == "kalman":
        spec = brownian_chain_spec(task.config)
        obs = {int(k.split("_")[1]): v for k, v in model.observations.items()}
        res = kalman_filter_smoother(spec, obs)
        names = [f"x_{t}" for t in range(task.config.steps)]
        means = {n: float(res.smoothed_means[t]) for t, n in enumerate(names)}
        sds = {n: float(math.sqrt(res.smoothed_vars[t])) for t, n in enumerate(names)}
        return {"means": means, "sds": sds, "source": "kalman"}
    if task.oracle == "metropolis":
        res = metropolis_sample(model, ChainConfig(steps=20000, burn_in=6000, seed=seed))
        return {
            "means": res.means,
            "sds": res.sds,
            "source": "metropolis",
            "reliable": res.reliable,
        }
    return None


def _normalized_errors(surrogate, params, oracle, seed):
    if oracle is None:
        return None, None
    q_means, q_sds = surrogate_moments(surrogate, params, n_samples=MOMENT_SAMPLES, seed=seed)
    m_errs, s_errs = [], []
    for name, true_mean in oracle["means"].items():
        true_sd = oracle["sds"][name]
        if true_sd <= 0:
            continue
        m_errs.append(abs(q_means[name] - true_mean) / true_sd)
        s_errs.append(abs(q_sds[name] - true_sd) / true_sd)
    return float(np.mean(m_errs)), float(np.mean(s_errs))


def run_single(config: RunConfig, surrogate_kind, seed, oracle_cache=None):
    """One (task, surrogate, seed) cell; failures become flagged rows."""
    task = _build_task(config)
    model, _ = _conditioned_model(task, seed)
    row = {
        "task": config.task,
        "surrogate": surrogate_kind,
        "seed": seed,
        "final_neg_elbo": "",
        "mean_error": "",
        "sd_error": "",
        "oracle_reliable": "",
        "iterations": 0,
        "converged": False,
        "failed": False,
    }
    trajectory = []
    wall = 0.0
    try:
        train = TrainConfig(
            steps=config.steps,
            lr=config.lr,
            n_samples=config.n_samples,
            seed=seed,
        )
        result = fit(model, surrogate_kind, train)
        trajectory = result.trajectory
        wall = result.wall_time
        row["iterations"] = result.steps_run
        row["converged"] = result.converged
        if result.diverged:
            row["failed"] = True
            return row, trajectory, wall
        est = elbo_estimate(
            model, result.surrogate, result.params,
            n_samples=FINAL_ELBO_SAMPLES, seed=seed + 100_000,
        )
        row["final_neg_elbo"] = -est.value
        if oracle_cache is not None and "stats" in oracle_cache:
            oracle = oracle_cache["stats"]
        else:
            oracle = _oracle_stats(task, model, seed + 300_000)
            if oracle_cache is not None:
                oracle_cache["stats"] = oracle
        m_err, s_err = _normalized_errors(
            result.surrogate, result.params, oracle, seed + 200_000
        )
        if m_err is not None:
            row["mean_error"] = m_err
            row["sd_error"] = s_err
            row["oracle_reliable"] = oracle.get("reliable", True)
    except Exception:
        row["failed"] = True
    return row, trajectory, wall


def _pool_job(args):
    config_dict, surrogate_kind, seed, oracle_stats = args
    config = RunConfig(**config_dict)
    cache = {"stats": oracle_stats} if oracle_stats is not None else None
    return run_single(config, surrogate_kind, seed, oracle_cache=cache)


def run_benchmark(config: RunConfig):
    """Full sweep; writes result files into config.out_dir."""
    os.makedirs(config.out_dir, exist_ok=True)
    task = _build_task(config)

    shared_oracle = None
    if task.is_pre_conditioned and task.oracle == "metropolis":
        # fixed-data tasks share one oracle run across all seeds
        shared_oracle = _oracle_stats(task, task.model, seed=0)

    jobs = [(surrogate, seed) for surrogate in config.surrogates for seed in config.seeds]
    outcomes = {}
    if config.workers > 1:
        config_dict = {
            "task": config.task,
            "surrogates": config.surrogates,
            "steps": config.steps,
            "lr": config.lr,
            "n_samples": config.n_samples,
            "seeds": config.seeds,
            "out_dir": config.out_dir,
            "task_overrides": config.task_overrides,
            "workers": 1,
        }
        args = [(config_dict, s, seed, shared_oracle) for s, seed in jobs]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for (s, seed), outcome in zip(jobs, pool.map(_pool_job, args)):
                outcomes[(s, seed)] = outcome
    else:
        # surrogates at the same seed share data, so they share the oracle too
        per_seed_cache = {}
        for s, seed in jobs:
            if shared_oracle is not None:
                cache = {"stats": shared_oracle}
            else:
                cache = per_seed_cache.setdefault(seed, {})
            outcomes[(s, seed)] = run_single(config, s, seed, oracle_cache=cache)

    rows, timings = [], []
    for surrogate, seed in sorted(outcomes):
        row, trajectory, wall = outcomes[(surrogate, seed)]
        rows.append(row)
        timings.append((row["task"], surrogate, seed, wall))
        traj_path = os.path.join(
            config.out_dir, f"trajectory_{row['task']}_{surrogate}_{seed}.csv"
        )
        _write_trajectory(trajectory, traj_path)

    results_path = os.path.join(config.out_dir, "results.csv")
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in RESULT_COLUMNS])

    with open(os.path.join(config.out_dir, "timings.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "surrogate", "seed", "wall_time_s"])
        for task_id, surrogate, seed, wall in timings:
            writer.writerow([task_id, surrogate, seed, f"{wall:.3f}"])

    meta = {
        "version": __version__,
        "config": {
            "task": config.task,
            "surrogates": list(config.surrogates),
            "steps": config.steps,
            "lr": config.lr,
            "n_samples": config.n_samples,
            "seeds": list(config.seeds),
            "task_overrides": config.task_overrides,
        },
        "oracle": task.oracle,
        "final_elbo_samples": FINAL_ELBO_SAMPLES,
    }
    with open(os.path.join(config.out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)

    summarize(config.out_dir)
    return results_path


def _format_cell(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return value


def _write_trajectory(trajectory, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "negative_elbo", "wall_time_s"])
        for step, loss, wall in trajectory:
            writer.writerow([step, repr(loss), f"{wall:.3f}"])


# ---------------------------------------------------------------------------
# aggregation


def summarize(result_dir):
    """Aggregate results.csv into summary.csv and a printable table."""
    path = os.path.join(result_dir, "results.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no results.csv under {result_dir!r}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"results.csv in {result_dir!r} is empty")

    groups = {}
    for row in rows:
        if row["failed"] == "true":
            continue
        groups.setdefault((row["task"], row["surrogate"]), []).append(row)
    if not groups:
        raise ValueError(f"no successful rows in {path!r}")

    def mean_se(values):
        if not values:
            return None, None
        arr = np.asarray(values, dtype=float)
        se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
        return float(arr.mean()), se

    summary = []
    for (task_id, surrogate), grp in sorted(groups.items()):
        elbo_mean, elbo_se = mean_se([float(r["final_neg_elbo"]) for r in grp])
        m_vals = [float(r["mean_error"]) for r in grp if r["mean_error"] != ""]
        s_vals = [float(r["sd_error"]) for r in grp if r["sd_error"] != ""]
        m_mean, m_se = mean_se(m_vals)
        s_mean, s_se = mean_se(s_vals)
        summary.append(
            {
                "task": task_id,
                "surrogate": surrogate,
                "n_runs": len(grp),
                "neg_elbo_mean": elbo_mean,
                "neg_elbo_se": elbo_se,
                "mean_error_mean": m_mean,
                "mean_error_se": m_se,
                "sd_error_mean": s_mean,
                "sd_error_se": s_se,
                "best": "",
            }
        )
    for task_id in {s["task"] for s in summary}:
        candidates = [s for s in summary if s["task"] == task_id and s["neg_elbo_mean"] is not None]
        if candidates:
            min(candidates, key=lambda s: s["neg_elbo_mean"])["best"] = "*"

    columns = list(summary[0].keys())
    with open(os.path.join(result_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for s in summary:
            writer.writerow(["" if s[c] is None else s[c] for c in columns])

    lines = [
        f"{'task':<6} {'surrogate':<12} {'n':>3} {'neg ELBO (mean+/-se)':>24} "
        f"{'M err':>8} {'SD err':>8} best"
    ]
    for s in summary:
        elbo = (
            f"{s['neg_elbo_mean']:.3f} +/- {s['neg_elbo_se']:.3f}"
            if s["neg_elbo_mean"] is not None
            else "n/a"
        )
        m_err = f"{s['mean_error_mean']:.3f}" if s["mean_error_mean"] is not None else "-"
        s_err = f"{s['sd_error_mean']:.3f}" if s["sd_error_mean"] is not None else "-"
        lines.append(
            f"{s['task']:<6} {s['surrogate']:<12} {s['n_runs']:>3} {elbo:>24} "
            f"{m_err:>8} {s_err:>8} {s['best']}"
        )
    table = "\n".join(lines)
    with open(os.path.join(result_dir, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    return table


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0
    try:
        config = parse_flags(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run_benchmark(config)
    print(summarize(config.out_dir))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
