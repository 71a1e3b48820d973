"""Benchmark protocol: dataset generation, evaluation metrics, experiment matrix.

Protocol per system (all config-overridable):

  fn    theta=(0.2, 0.2, 3),  x0=(-1, 1),        observed on [0, 20],  noise 0.2
  lv    theta=(1.5, 1, 1, 3), x0=(5, 0.2),       observed on [0, 12],  noise 0.1
  hes1  theta=(0.022, 0.3, 0.031, 0.028, 0.5, 20, 0.3),
                              x0=(1.44, 2.04, 17.9), observed on [0, 240], noise 0.1

41 equally spaced observations cover the observation window (about two
cycles); the same-length forecast window that follows carries no data.
lv and hes1 run in log space end to end: the stated noise is additive on
log(x), and their RMSEs are log-space RMSEs. Evaluation integrates from the
inferred initial point and parameters and scores 2,561 equally spaced
points across both windows (fit indices 0..1280, forecast 1281..2560).

Observation noise comes from a counter-based Philox stream keyed by
(system, seed, component), so datasets are reproducible across platforms
and thread counts.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelHyperparams, fit_hyperparameters, hyperparams_to_dict
from .map_optimizer import (
    InferenceProblem,
    InferenceResult,
    OptimizerConfig,
    OptimizerDivergedError,
    solve_problem,
)
from .ode_models import (
    IntegrationDivergedError,
    OdeSystem,
    TimeGrid,
    Trajectory,
    get_system,
    integrate_rk4,
)

__all__ = [
    "SystemProtocol",
    "ObservationSet",
    "ExperimentConfig",
    "MetricsRow",
    "PROTOCOLS",
    "TRUNCATION_DEFAULTS",
    "DISCRETIZATIONS",
    "generate_dataset",
    "ground_truth",
    "fit_dataset_hyperparams",
    "run_inference",
    "evaluate_rmse",
    "run_benchmark",
    "config_hash",
    "observations_to_csv",
    "observations_from_csv",
]

N_OBS = 41
N_EVAL = 2561
TRUTH_OVERSAMPLE = 8
DISCRETIZATIONS = (41, 81, 161, 321, 641, 1281)


@dataclass(frozen=True)
class SystemProtocol:
    name: str
    true_theta: np.ndarray
    true_x0: np.ndarray          # raw space
    obs_horizon: float
    noise_sd: float
    log_space: bool


PROTOCOLS = {
    "fn": SystemProtocol("fn", np.array([0.2, 0.2, 3.0]), np.array([-1.0, 1.0]),
                         20.0, 0.2, False),
    "lv": SystemProtocol("lv", np.array([1.5, 1.0, 1.0, 3.0]), np.array([5.0, 0.2]),
                         12.0, 0.1, True),
    "hes1": SystemProtocol("hes1",
                           np.array([0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3]),
                           np.array([1.438575, 2.037488, 17.90385]),
                           240.0, 0.1, True),
}

# Stabilized truncation counts (eigen, fourier) per discretization.
TRUNCATION_DEFAULTS = {
    "fn": {41: (41, 11), 81: (41, 11), 161: (81, 21), 321: (81, 41),
           641: (81, 41), 1281: (81, 41)},
    "hes1": {41: (21, 11), 81: (81, 21), 161: (81, 21), 321: (81, 41),
             641: (81, 41), 1281: (81, 41)},
    "lv": {41: (41, 21), 81: (41, 21), 161: (81, 41), 321: (81, 41),
           641: (81, 41), 1281: (81, 41)},
}


@dataclass(frozen=True)
class ObservationSet:
    system: str
    tau: TimeGrid
    values: np.ndarray   # (D, N), log space for lv/hes1
    noise_sd: float
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    discretization: int = 161
    method: str = "efigp"            # "efigp" | "magi"
    eigen: int | None = None          # defaults to the stabilized table
    fourier: int | None = None
    seeds: tuple = (0,)
    noise: float | None = None        # defaults to the system protocol
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    obs_horizon: float | None = None

    def __post_init__(self):
        if self.system not in PROTOCOLS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.method not in ("efigp", "magi"):
            raise ValueError("method must be 'efigp' or 'magi'")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def protocol(self) -> SystemProtocol:
        proto = PROTOCOLS[self.system]
        changes = {}
        if self.noise is not None:
            changes["noise_sd"] = self.noise
        if self.obs_horizon is not None:
            changes["obs_horizon"] = self.obs_horizon
        return replace(proto, **changes) if changes else proto

    def truncation(self):
        if self.eigen is not None and self.fourier is not None:
            return self.eigen, self.fourier
        table = TRUNCATION_DEFAULTS[self.system].get(self.discretization)
        if table is None:
            raise ValueError("no default truncation for this discretization; "
                             "pass eigen/fourier explicitly")
        return (self.eigen or table[0], self.fourier or table[1])

    def to_dict(self) -> dict:
        return {
            "system": self.system, "discretization": self.discretization,
            "method": self.method, "eigen": self.eigen, "fourier": self.fourier,
            "seeds": list(self.seeds), "noise": self.noise,
            "optimizer": {
                "learning_rate": self.optimizer.learning_rate,
                "max_iters": self.optimizer.max_iters,
                "tol": self.optimizer.tol,
            },
            "obs_horizon": self.obs_horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        opt = d.get("optimizer", {})
        return cls(
            system=d["system"],
            discretization=int(d.get("discretization", 161)),
            method=d.get("method", "efigp"),
            eigen=d.get("eigen"), fourier=d.get("fourier"),
            seeds=tuple(int(s) for s in d.get("seeds", [0])),
            noise=d.get("noise"),
            optimizer=OptimizerConfig(
                learning_rate=float(opt.get("learning_rate", 1e-2)),
                max_iters=int(opt.get("max_iters", 30_000)),
                tol=float(opt.get("tol", 1e-9)),
            ),
            obs_horizon=d.get("obs_horizon"),
        )


def config_hash(cfg: ExperimentConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:12]


# --- ground truth and datasets ----------------------------------------------

_TRUTH_CACHE: dict = {}


def _initial_state(system: OdeSystem, proto: SystemProtocol) -> np.ndarray:
    return np.log(proto.true_x0) if system.log_space else proto.true_x0.copy()


def ground_truth(proto: SystemProtocol) -> Trajectory:
    """True trajectory on the 2,561-point evaluation grid over both windows.

    Integrated at 8x the evaluation density and subsampled, so the stored
    values carry far less solver error than any quantity compared to them.
    Cached per (system, horizon).
    """
    key = (proto.name, proto.obs_horizon)
    if key not in _TRUTH_CACHE:
        system = get_system(proto.name)
        n_fine = TRUTH_OVERSAMPLE * (N_EVAL - 1) + 1
        fine = TimeGrid.regular(0.0, 2.0 * proto.obs_horizon, n_fine)
        traj = integrate_rk4(system, _initial_state(system, proto),
                             proto.true_theta, fine)
        eval_grid = TimeGrid.regular(0.0, 2.0 * proto.obs_horizon, N_EVAL)
        values = traj.values[:, ::TRUTH_OVERSAMPLE]
        _TRUTH_CACHE[key] = Trajectory(eval_grid, values)
    return _TRUTH_CACHE[key]


def _noise_stream(system_name: str, seed: int, component: int):
    digest = hashlib.blake2b(f"{system_name}/{seed}/{component}".encode(),
                             digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_dataset(proto: SystemProtocol, seed: int) -> ObservationSet:
    """41 equally spaced noisy observations on the observation window."""
    system = get_system(proto.name)
    truth = ground_truth(proto)
    tau = TimeGrid.regular(0.0, proto.obs_horizon, N_OBS)
    stride = (N_EVAL - 1) // (2 * (N_OBS - 1))  # obs window is the first half
    tau_idx = np.arange(N_OBS) * stride
    clean = truth.values[:, tau_idx]
    values = np.empty_like(clean)
    for d in range(system.dim):
        noise = _noise_stream(proto.name, seed, d).standard_normal(N_OBS)
        values[d] = clean[d] + proto.noise_sd * noise
    return ObservationSet(system=proto.name, tau=tau, values=values,
                          noise_sd=proto.noise_sd, seed=seed)


def observations_to_csv(obs: ObservationSet, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,comp,value\n")
        for d in range(obs.values.shape[0]):
            for t, v in zip(obs.tau.points, obs.values[d]):
                fh.write(f"{t:.17g},{d + 1},{v:.17g}\n")


def observations_from_csv(path, system: str, noise_sd: float = 0.0,
                          seed: int = -1) -> ObservationSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    comps = data[:, 1].astype(int)
    d_max = comps.max()
    times = np.unique(data[:, 0])
    values = np.empty((d_max, times.size))
    for d in range(1, d_max + 1):
        rows = data[comps == d]
        order = np.argsort(rows[:, 0])
        if not np.array_equal(rows[order, 0], times):
            raise ValueError("every component must be observed at the same times")
        values[d - 1] = rows[order, 2]
    return ObservationSet(system=system, tau=TimeGrid(times), values=values,
                          noise_sd=noise_sd, seed=seed)


# --- inference and evaluation -------------------------------------------------


def fit_dataset_hyperparams(obs: ObservationSet,
                            fixed_noise_sd: float | None = None) -> list:
    return [fit_hyperparameters(obs.tau.points, obs.values[d],
                                fixed_noise_sd=fixed_noise_sd)
            for d in range(obs.values.shape[0])]


@dataclass
class MetricsRow:
    system: str
    method: str
    discretization: int
    seed: int
    rmse_fit: list
    rmse_forecast: list
    rmse_combined: list
    param_errors: list
    wall_time: float
    converged: bool
    diverged: bool


def evaluate_rmse(result: InferenceResult, proto: SystemProtocol,
                  wall_time: float = float("nan"),
                  discretization: int = 0, method: str = "",
                  seed: int = -1) -> MetricsRow:
    """Reconstruct from (x0_hat, theta_hat) and score against ground truth.

    A reconstruction that diverges (or a non-finite estimate) yields inf
    RMSEs and the diverged flag instead of aborting.
    """
    system = get_system(proto.name)
    truth = ground_truth(proto)
    theta = np.asarray(result.theta_hat, dtype=float)
    x0 = np.array([x[0] for x in result.x_hat])
    param_errors = np.abs(theta - proto.true_theta).tolist()

    diverged = not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x0)))
    recon = None
    if not diverged:
        try:
            recon = integrate_rk4(system, x0, theta, truth.grid)
        except IntegrationDivergedError:
            diverged = True
        else:
            diverged = not np.all(np.isfinite(recon.values))

    d_dim = system.dim
    if diverged:
        inf = [float("inf")] * d_dim
        return MetricsRow(proto.name, method, discretization, seed,
                          inf, list(inf), list(inf), param_errors,
                          wall_time, result.converged, True)

    half = (N_EVAL - 1) // 2  # fit window: indices 0..half inclusive
    err = recon.values - truth.values
    rmse_fit = np.sqrt(np.mean(err[:, :half + 1] ** 2, axis=1)).tolist()
    rmse_forecast = np.sqrt(np.mean(err[:, half + 1:] ** 2, axis=1)).tolist()
    rmse_combined = np.sqrt(np.mean(err ** 2, axis=1)).tolist()
    return MetricsRow(proto.name, method, discretization, seed,
                      rmse_fit, rmse_forecast, rmse_combined, param_errors,
                      wall_time, result.converged, False)


def run_inference(cfg: ExperimentConfig, seed: int,
                  fixed_noise_sd: float | None = None):
    """Dataset -> hyperparameters -> MAP. Returns (result, seconds, obs, hp).

    The reported seconds cover precompute + optimization only.
    """
    proto = cfg.protocol
    obs = generate_dataset(proto, seed)
    hp = fit_dataset_hyperparams(obs, fixed_noise_sd=fixed_noise_sd)
    grid = TimeGrid.regular(0.0, proto.obs_horizon, cfg.discretization)
    problem = InferenceProblem(system=get_system(cfg.system), grid=grid, hp=hp,
                               obs_times=obs.tau.points, obs_values=obs.values,
                               method=cfg.method, optimizer=cfg.optimizer)
    if cfg.method == "efigp":
        j, l = cfg.truncation()
        result, seconds = solve_problem(problem, j=j, l=l)
    else:
        result, seconds = solve_problem(problem)
    return result, seconds, obs, hp


def _run_cell(cfg: ExperimentConfig, seed: int) -> MetricsRow:
    proto = cfg.protocol
    try:
        result, seconds, _, _ = run_inference(cfg, seed)
    except (OptimizerDivergedError, IntegrationDivergedError):
        d_dim = get_system(cfg.system).dim
        p = proto.true_theta.size
        inf = [float("inf")] * d_dim
        return MetricsRow(cfg.system, cfg.method, cfg.discretization, seed,
                          inf, list(inf), list(inf), [float("inf")] * p,
                          float("nan"), False, True)
    return evaluate_rmse(result, proto, wall_time=seconds,
                         discretization=cfg.discretization,
                         method=cfg.method, seed=seed)


def _fmt(x) -> str:
    return f"{x:.17g}"


def run_benchmark(configs: list, out_dir) -> dict:
    """Execute every (config, seed) cell and write the report files.

    Writes runs.csv, trajectory_rmse.csv, parameter_errors.csv (all
    deterministic given the config), runtime.csv (wall-clock, inherently
    run-dependent) and manifest.json. Returns the in-memory report.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cells = sorted(((config_hash(c), c) for c in configs), key=lambda t: t[0])
    rows = []
    for h, cfg in cells:
        for seed in sorted(cfg.seeds):
            row = _run_cell(cfg, seed)
            rows.append((h, row))

    with open(out / "runs.csv", "w") as fh:
        fh.write("config,system,method,discretization,seed,component,"
                 "rmse_fit,rmse_forecast,rmse_combined,converged,diverged\n")
        for h, r in rows:
            for d in range(len(r.rmse_combined)):
                fh.write(f"{h},{r.system},{r.method},{r.discretization},{r.seed},"
                         f"{d + 1},{_fmt(r.rmse_fit[d])},{_fmt(r.rmse_forecast[d])},"
                         f"{_fmt(r.rmse_combined[d])},{int(r.converged)},"
                         f"{int(r.diverged)}\n")

    def cell_rows(h):
        return [r for hh, r in rows if hh == h]

    with open(out / "trajectory_rmse.csv", "w") as fh:
        fh.write("config,system,method,discretization,component,"
                 "rmse_mean,rmse_sd,n_ok,n_failed\n")
        for h, cfg in cells:
            rs = cell_rows(h)
            ok = [r for r in rs if not r.diverged]
            for d in range(len(rs[0].rmse_combined)):
                vals = np.array([r.rmse_combined[d] for r in ok])
                mean = _fmt(vals.mean()) if vals.size else "nan"
                sd = _fmt(vals.std(ddof=1)) if vals.size > 1 else "nan"
                fh.write(f"{h},{cfg.system},{cfg.method},{cfg.discretization},"
                         f"{d + 1},{mean},{sd},{len(ok)},{len(rs) - len(ok)}\n")

    with open(out / "parameter_errors.csv", "w") as fh:
        fh.write("config,system,method,discretization,parameter,"
                 "abs_error_mean,abs_error_sd,n_ok,n_failed\n")
        for h, cfg in cells:
            rs = cell_rows(h)
            ok = [r for r in rs if not r.diverged]
            for p in range(len(rs[0].param_errors)):
                vals = np.array([r.param_errors[p] for r in ok])
                mean = _fmt(vals.mean()) if vals.size else "nan"
                sd = _fmt(vals.std(ddof=1)) if vals.size > 1 else "nan"
                fh.write(f"{h},{cfg.system},{cfg.method},{cfg.discretization},"
                         f"{p + 1},{mean},{sd},{len(ok)},{len(rs) - len(ok)}\n")

    with open(out / "runtime.csv", "w") as fh:
        fh.write("config,system,method,discretization,"
                 "time_mean,time_sd,time_median,n\n")
        for h, cfg in cells:
            rs = [r for r in cell_rows(h) if np.isfinite(r.wall_time)]
            if rs:
                t = np.array([r.wall_time for r in rs])
                fh.write(f"{h},{cfg.system},{cfg.method},{cfg.discretization},"
                         f"{t.mean():.6f},{t.std(ddof=1) if t.size > 1 else 0.0:.6f},"
                         f"{np.median(t):.6f},{t.size}\n")

    manifest = {
        "cells": [{"hash": h, "config": cfg.to_dict()} for h, cfg in cells],
        "n_eval_points": N_EVAL,
        "n_observations": N_OBS,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    return {"rows": [r for _, r in rows], "manifest": manifest}
