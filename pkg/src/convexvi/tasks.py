"""Benchmark model constructors and data generators.

Six tasks: Brownian-motion bridging with fixed or unknown scales
(br/brg), a stochastic Lorenz system likewise (lz/lzg), Eight Schools
(es), and a hierarchical Radon regression (radon).  The SDE tasks
declare observation nodes only at masked-in steps, so the latent set is
exactly the state chain; data for them is produced by forward
simulation (``generate_data``) and bound with ``condition``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import HALF_NORMAL, LOG_NORMAL, NORMAL
from .model import JointModel, build_joint, condition, rv, sample_forward
from .oracles import LinearGaussianChainSpec


def default_mask(steps):
    """Observe the first and last thirds; 30 steps -> first and last 10."""
    third = steps // 3
    return tuple(t < third or t >= steps - third for t in range(steps))


@dataclass(frozen=True)
class SdeTaskConfig:
    steps: int = 30
    dt: float = 0.01
    innovation_scale: float = 0.1
    obs_scale: float = 0.15
    mask: tuple = None

    def __post_init__(self):
        if self.steps <= 0 or self.dt <= 0:
            raise ValueError("steps and dt must be positive")
        if self.innovation_scale <= 0 or self.obs_scale <= 0:
            raise ValueError("scales must be positive")
        if self.mask is None:
            object.__setattr__(self, "mask", default_mask(self.steps))
        elif len(self.mask) != self.steps:
            raise ValueError("mask length must equal steps")
        else:
            object.__setattr__(self, "mask", tuple(bool(b) for b in self.mask))


BR_CONFIG = SdeTaskConfig(steps=30, dt=0.01, innovation_scale=0.1, obs_scale=0.15)
LZ_CONFIG = SdeTaskConfig(steps=30, dt=0.02, innovation_scale=0.1, obs_scale=1.0)


def make_brownian(config: SdeTaskConfig = BR_CONFIG, with_globals=False) -> JointModel:
    """Driftless random walk, x_0 anchored at zero, ends observed.

    With globals, the innovation and observation scales become
    LogNormal(0, 2) latents.
    """
    sqdt = math.sqrt(config.dt)
    nodes = []
    globals_ = ()
    if with_globals:
        nodes.append(rv("sigma_x", LOG_NORMAL, params=(0.0, 2.0)))
        nodes.append(rv("sigma_obs", LOG_NORMAL, params=(0.0, 2.0)))
        globals_ = ("sigma_x", "sigma_obs")
        nodes.append(rv("x_0", NORMAL, parents=("sigma_x",), link=lambda s: (0.0, s * sqdt)))
        for t in range(1, config.steps):
            nodes.append(
                rv(f"x_{t}", NORMAL, parents=(f"x_{t-1}", "sigma_x"),
                   link=lambda p, s: (p, s * sqdt))
            )
        for t in range(config.steps):
            if config.mask[t]:
                nodes.append(
                    rv(f"y_{t}", NORMAL, parents=(f"x_{t}", "sigma_obs"),
                       link=lambda x, s: (x, s))
                )
    else:
        step_scale = config.innovation_scale * sqdt
        nodes.append(rv("x_0", NORMAL, params=(0.0, step_scale)))
        for t in range(1, config.steps):
            nodes.append(
                rv(f"x_{t}", NORMAL, parents=(f"x_{t-1}",), link=lambda p: (p, step_scale))
            )
        for t in range(config.steps):
            if config.mask[t]:
                nodes.append(
                    rv(f"y_{t}", NORMAL, parents=(f"x_{t}",),
                       link=lambda x: (x, config.obs_scale))
                )
    return build_joint(nodes, global_names=globals_)


def brownian_chain_spec(config: SdeTaskConfig = BR_CONFIG) -> LinearGaussianChainSpec:
    """The fixed-scale Brownian task as a linear-Gaussian chain."""
    var = (config.innovation_scale**2) * config.dt
    return LinearGaussianChainSpec(
        init_mean=0.0,
        init_var=var,
        transition=[1.0] * (config.steps - 1),
        innovation_var=[var] * (config.steps - 1),
        obs_var=[config.obs_scale**2] * config.steps,
        mask=list(config.mask),
    )


def lorenz_drift(x0, x1, x2):
    """Deterministic part of the stochastic Lorenz system."""
    return (
        10.0 * (x1 - x0),
        x0 * (28.0 - x2) - x1,
        x0 * x1 - (8.0 / 3.0) * x2,
    )


def make_lorenz(config: SdeTaskConfig = LZ_CONFIG, with_globals=False) -> JointModel:
    """Euler-Maruyama discretization of the stochastic Lorenz system.

    The chain starts from the origin; only the first coordinate is
    observed.  With globals, the innovation and observation scales
    become LogNormal(-1, 1) latents.
    """
    dt = config.dt
    sqdt = math.sqrt(dt)

    def locs(x0, x1, x2):
        d0, d1, d2 = lorenz_drift(x0, x1, x2)
        return (x0 + d0 * dt, x1 + d1 * dt, x2 + d2 * dt)

    nodes = []
    globals_ = ()
    if with_globals:
        nodes.append(rv("sigma", LOG_NORMAL, params=(-1.0, 1.0)))
        nodes.append(rv("sigma_obs", LOG_NORMAL, params=(-1.0, 1.0)))
        globals_ = ("sigma", "sigma_obs")

    def add_dim(t, i):
        if t == 0:
            # previous state pinned at the origin, where the drift vanishes
            if with_globals:
                nodes.append(
                    rv(f"x_{t}_{i}", NORMAL, parents=("sigma",), link=lambda s: (0.0, s * sqdt))
                )
            else:
                nodes.append(
                    rv(f"x_{t}_{i}", NORMAL, params=(0.0, config.innovation_scale * sqdt))
                )
            return
        prev = (f"x_{t-1}_0", f"x_{t-1}_1", f"x_{t-1}_2")
        if with_globals:
            nodes.append(
                rv(
                    f"x_{t}_{i}",
                    NORMAL,
                    parents=prev + ("sigma",),
                    link=lambda a, b, c, s, i=i: (locs(a, b, c)[i], s * sqdt),
                )
            )
        else:
            scale = config.innovation_scale * sqdt
            nodes.append(
                rv(
                    f"x_{t}_{i}",
                    NORMAL,
                    parents=prev,
                    link=lambda a, b, c, i=i: (locs(a, b, c)[i], scale),
                )
            )

    for t in range(config.steps):
        for i in range(3):
            add_dim(t, i)
    for t in range(config.steps):
        if config.mask[t]:
            if with_globals:
                nodes.append(
                    rv(f"y_{t}", NORMAL, parents=(f"x_{t}_0", "sigma_obs"),
                       link=lambda x, s: (x, s))
                )
            else:
                nodes.append(
                    rv(f"y_{t}", NORMAL, parents=(f"x_{t}_0",),
                       link=lambda x: (x, config.obs_scale))
                )
    return build_joint(nodes, global_names=globals_)


# ---------------------------------------------------------------------------
# hierarchical models


@dataclass(frozen=True)
class SchoolsData:
    effects: tuple = (28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0)
    standard_errors: tuple = (15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0)

    def __post_init__(self):
        if len(self.effects) != 8 or len(self.standard_errors) != 8:
            raise ValueError("eight schools needs exactly 8 records")
        if any(s <= 0 for s in self.standard_errors):
            raise ValueError("standard errors must be positive")


def make_eight_schools(data: SchoolsData = SchoolsData()) -> JointModel:
    """Coaching-effect hierarchy, conditioned on the supplied effects.

    mu ~ N(0, 100), tau ~ LogNormal(5, 1), theta_i ~ N(mu, tau),
    y_i ~ N(theta_i, se_i); scale arguments are standard deviations.
    """
    nodes = [
        rv("mu", NORMAL, params=(0.0, 100.0)),
        rv("tau", LOG_NORMAL, params=(5.0, 1.0)),
    ]
    for i in range(8):
        nodes.append(rv(f"theta_{i}", NORMAL, parents=("mu", "tau"), link=lambda m, t: (m, t)))
        se = data.standard_errors[i]
        nodes.append(
            rv(f"y_{i}", NORMAL, parents=(f"theta_{i}",), link=lambda th, se=se: (th, se))
        )
    m = build_joint(nodes, global_names=("mu", "tau"))
    return condition(m, {f"y_{i}": data.effects[i] for i in range(8)})


@dataclass(frozen=True)
class RadonRecord:
    county: int
    log_uranium: float
    floor: int
    county_mean_floor: float
    log_radon: float

    def __post_init__(self):
        if self.floor not in (0, 1):
            raise ValueError(f"floor must be 0 or 1, got {self.floor!r}")
        if self.county < 0:
            raise ValueError("county index must be nonnegative")


def make_radon(records: Sequence[RadonRecord]) -> JointModel:
    """Hierarchical regression of log radon on floor and uranium.

    mu ~ N(0, 1), tau ~ HalfNormal(1), county effect theta_c ~ N(mu, tau),
    beta_{1..3} ~ N(0, 1), sigma ~ HalfNormal(1),
    y_j ~ N(beta1*z_c + beta2*floor_j + beta3*mean_floor_c + theta_c, sigma).
    """
    if not records:
        raise ValueError("need at least one record")
    counties = sorted({r.county for r in records})
    if counties != list(range(len(counties))):
        raise ValueError("county indices must be contiguous from 0")
    nodes = [
        rv("mu", NORMAL, params=(0.0, 1.0)),
        rv("tau", HALF_NORMAL, params=(1.0,)),
    ]
    for c in counties:
        nodes.append(rv(f"theta_{c}", NORMAL, parents=("mu", "tau"), link=lambda m, t: (m, t)))
    for k in (1, 2, 3):
        nodes.append(rv(f"beta_{k}", NORMAL, params=(0.0, 1.0)))
    nodes.append(rv("sigma", HALF_NORMAL, params=(1.0,)))
    observations = {}
    for j, r in enumerate(records):
        name = f"y_{j}"
        nodes.append(
            rv(
                name,
                NORMAL,
                parents=("beta_1", "beta_2", "beta_3", f"theta_{r.county}", "sigma"),
                link=lambda b1, b2, b3, th, s, r=r: (
                    b1 * r.log_uranium + b2 * float(r.floor) + b3 * r.county_mean_floor + th,
                    s,
                ),
            )
        )
        observations[name] = r.log_radon
    globals_ = ("mu", "tau", "beta_1", "beta_2", "beta_3", "sigma")
    return condition(build_joint(nodes, global_names=globals_), observations)


def synthetic_radon_records(n_counties=3, n_records=12, seed=0):
    """Forward-simulated records from the prior at a fixed seed."""
    rng = np.random.default_rng(seed)
    mu = rng.normal()
    tau = abs(rng.normal())
    theta = rng.normal(mu, tau, size=n_counties)
    beta = rng.normal(size=3)
    sigma = abs(rng.normal())
    county_of = rng.integers(0, n_counties, size=n_records)
    # make sure every county appears so indices stay contiguous
    county_of[:n_counties] = np.arange(n_counties)
    log_uranium = rng.normal(size=n_counties)
    floors = rng.integers(0, 2, size=n_records)
    mean_floor = np.zeros(n_counties)
    for c in range(n_counties):
        member = county_of == c
        mean_floor[c] = floors[member].mean() if member.any() else 0.0
    records = []
    for j in range(n_records):
        c = int(county_of[j])
        loc = (
            beta[0] * log_uranium[c]
            + beta[1] * floors[j]
            + beta[2] * mean_floor[c]
            + theta[c]
        )
        records.append(
            RadonRecord(
                county=c,
                log_uranium=float(log_uranium[c]),
                floor=int(floors[j]),
                county_mean_floor=float(mean_floor[c]),
                log_radon=float(rng.normal(loc, sigma)),
            )
        )
    return records


RADON_CSV_COLUMNS = ("county", "log_uranium", "floor", "county_mean_floor", "log_radon")


def load_radon_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RADON_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"radon csv missing columns {sorted(missing)}")
        return [
            RadonRecord(
                county=int(row["county"]),
                log_uranium=float(row["log_uranium"]),
                floor=int(row["floor"]),
                county_mean_floor=float(row["county_mean_floor"]),
                log_radon=float(row["log_radon"]),
            )
            for row in reader
        ]


def save_radon_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RADON_CSV_COLUMNS)
        for r in records:
            writer.writerow([r.county, r.log_uranium, r.floor, r.county_mean_floor, r.log_radon])


# ---------------------------------------------------------------------------
# task registry


@dataclass(frozen=True)
class Task:
    """A benchmark bundle: model, observation names, oracle hint.

    `data_model` is the generative process data is simulated from; for
    the global-scale variants (brg/lzg) it is the fixed-scale twin, so
    datasets come from the same law as br/lz and only the inference
    model treats the scales as unknown.
    """

    task_id: str
    model: JointModel
    observed_names: tuple
    oracle: str  # "kalman" | "metropolis" | "none"
    config: object = None
    data_model: JointModel = None

    @property
    def is_pre_conditioned(self):
        return bool(self.model.observations)


def generate_data(task: Task, seed):
    """Forward-simulate the generative model; returns (observations,
    ground-truth trace) with the observation mask applied."""
    if task.is_pre_conditioned:
        raise ValueError(f"task {task.task_id!r} ships with fixed data")
    trace = sample_forward(task.data_model or task.model, seed)
    observations = {name: trace.values[name] for name in task.observed_names}
    return observations, trace


TASK_IDS = ("br", "brg", "lz", "lzg", "es", "radon")


def get_task(task_id, sde_config=None, schools_data=None, radon_records=None) -> Task:
    if task_id in ("br", "brg"):
        cfg = sde_config or BR_CONFIG
        model = make_brownian(cfg, with_globals=task_id == "brg")
        data_model = make_brownian(cfg) if task_id == "brg" else None
        observed = tuple(f"y_{t}" for t in range(cfg.steps) if cfg.mask[t])
        oracle = "kalman" if task_id == "br" else "metropolis"
        return Task(task_id, model, observed, oracle, cfg, data_model)
    if task_id in ("lz", "lzg"):
        cfg = sde_config or LZ_CONFIG
        model = make_lorenz(cfg, with_globals=task_id == "lzg")
        data_model = make_lorenz(cfg) if task_id == "lzg" else None
        observed = tuple(f"y_{t}" for t in range(cfg.steps) if cfg.mask[t])
        return Task(task_id, model, observed, "none", cfg, data_model)
    if task_id == "es":
        data = schools_data or SchoolsData()
        model = make_eight_schools(data)
        return Task(task_id, model, tuple(f"y_{i}" for i in range(8)), "metropolis", data)
    if task_id == "radon":
        records = radon_records or synthetic_radon_records()
        model = make_radon(records)
        observed = tuple(f"y_{j}" for j in range(len(records)))
        return Task(task_id, model, observed, "metropolis", tuple(records))
    raise ValueError(f"unknown task {task_id!r}; choose from {TASK_IDS}")


def load_task_config(path):
    """JSON overrides for the SDE task defaults (steps, dt, scales, mask)."""
    with open(path) as fh:
        data = json.load(fh)
    allowed = {"steps", "dt", "innovation_scale", "obs_scale", "mask"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown task-config keys {sorted(unknown)}")
    if "mask" in data and data["mask"] is not None:
        data["mask"] = tuple(bool(b) for b in data["mask"])
    return data
