"""Command-line interface: simulate, infer, evaluate, benchmark, stabilize.

All randomness flows from explicit --seed arguments; nothing is read from
the environment.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .bench_harness import (
    ExperimentConfig,
    PROTOCOLS,
    evaluate_rmse,
    generate_dataset,
    ground_truth,
    fit_dataset_hyperparams,
    observations_from_csv,
    observations_to_csv,
    run_benchmark,
)
from .kernels import hyperparams_to_dict
from .map_optimizer import (
    InferenceProblem,
    InferenceResult,
    OptimizerConfig,
    result_to_dict,
    solve_problem,
    stabilize_truncation,
)
from .ode_models import TimeGrid, get_system

from dataclasses import replace


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x]


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x]


def cmd_simulate(args) -> int:
    proto = PROTOCOLS[args.system]
    if args.noise is not None:
        proto = replace(proto, noise_sd=args.noise)
    if args.horizon is not None:
        proto = replace(proto, obs_horizon=args.horizon)
    obs = generate_dataset(proto, args.seed)
    observations_to_csv(obs, args.out)
    print(f"wrote {obs.values.shape[1]} observations x "
          f"{obs.values.shape[0]} components to {args.out}")
    return 0


def cmd_infer(args) -> int:
    obs = observations_from_csv(args.data, system=args.system)
    system = get_system(args.system)
    if obs.values.shape[0] != system.dim:
        print(f"error: {args.system} has {system.dim} components, data has "
              f"{obs.values.shape[0]}", file=sys.stderr)
        return 2
    horizon = args.horizon if args.horizon is not None else obs.tau.end
    grid = TimeGrid.regular(obs.tau.start, horizon, args.disc)
    hp = fit_dataset_hyperparams(obs, fixed_noise_sd=args.noise_sd)
    cfg = OptimizerConfig(learning_rate=args.lr, max_iters=args.max_iters,
                          tol=args.tol, seed=args.seed)
    problem = InferenceProblem(system=system, grid=grid, hp=hp,
                               obs_times=obs.tau.points, obs_values=obs.values,
                               method=args.method, optimizer=cfg)
    if args.method == "efigp":
        table = ExperimentConfig(system=args.system, discretization=args.disc,
                                 eigen=args.eigen, fourier=args.fourier)
        j, l = table.truncation()
        result, seconds = solve_problem(problem, j=j, l=l)
    else:
        j = l = None
        result, seconds = solve_problem(problem)

    payload = {
        "system": args.system,
        "method": args.method,
        "discretization": args.disc,
        "eigen": j,
        "fourier": l,
        "horizon": horizon,
        "learning_rate": args.lr,
        "hyperparams": [hyperparams_to_dict(h, d) for d, h in enumerate(hp)],
        "inference_seconds": seconds,
    }
    payload.update(result_to_dict(result))
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"theta_hat = {np.round(result.theta_hat, 6).tolist()}  "
          f"({result.iterations} iterations, {seconds:.2f}s)")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.result) as fh:
        payload = json.load(fh)
    system_name = args.system or payload["system"]
    proto = PROTOCOLS[system_name]
    if args.horizon is not None:
        proto = replace(proto, obs_horizon=args.horizon)
    elif payload.get("horizon"):
        proto = replace(proto, obs_horizon=float(payload["horizon"]))

    theta = np.array(args.theta if args.theta is not None
                     else payload["theta_hat"], dtype=float)
    x0 = np.array(args.x0 if args.x0 is not None
                  else payload["x0_hat"], dtype=float)
    fake = InferenceResult(theta_hat=theta, x_hat=[np.array([v]) for v in x0],
                           z_hat=None, objective_trace=np.empty(0),
                           converged=bool(payload.get("converged", True)),
                           iterations=int(payload.get("iterations", 0)),
                           wall_time=float(payload.get("inference_seconds", 0.0)))
    row = evaluate_rmse(fake, proto, wall_time=fake.wall_time,
                        discretization=int(payload.get("discretization", 0)),
                        method=payload.get("method", ""))
    metrics = {
        "system": proto.name,
        "theta": theta.tolist(),
        "x0": x0.tolist(),
        "rmse_fit": row.rmse_fit,
        "rmse_forecast": row.rmse_forecast,
        "rmse_combined": row.rmse_combined,
        "param_abs_errors": row.param_errors,
        "diverged": row.diverged,
    }
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2)

    traj_path = args.trajectory_out
    if traj_path is None:
        traj_path = str(args.out).rsplit(".", 1)[0] + "_trajectory.csv"
    truth = ground_truth(proto)
    from .ode_models import IntegrationDivergedError, integrate_rk4
    d_dim = truth.values.shape[0]
    header = ("t," + ",".join(f"truth_x{i+1}" for i in range(d_dim))
              + "," + ",".join(f"recon_x{i+1}" for i in range(d_dim)))
    try:
        recon = integrate_rk4(get_system(proto.name), x0, theta, truth.grid).values
    except IntegrationDivergedError:
        recon = np.full_like(truth.values, np.nan)
    data = np.column_stack([truth.grid.points, truth.values.T, recon.T])
    np.savetxt(traj_path, data, delimiter=",", header=header, comments="",
               fmt="%.17g")
    print(f"combined RMSE = {np.round(row.rmse_combined, 4).tolist()}; "
          f"trajectory written to {traj_path}")
    return 0


def cmd_benchmark(args) -> int:
    with open(args.config) as fh:
        matrix = json.load(fh)
    configs = [ExperimentConfig.from_dict(d) for d in matrix["experiments"]]
    report = run_benchmark(configs, args.out)
    n = len(report["rows"])
    failed = sum(1 for r in report["rows"] if r.diverged)
    print(f"{n} runs ({failed} failed); reports in {args.out}/")
    return 0


def cmd_stabilize(args) -> int:
    obs = observations_from_csv(args.data, system=args.system)
    system = get_system(args.system)
    horizon = args.horizon if args.horizon is not None else obs.tau.end
    grid = TimeGrid.regular(obs.tau.start, horizon, args.disc)
    hp = fit_dataset_hyperparams(obs)
    cfg = OptimizerConfig(learning_rate=args.lr, max_iters=args.max_iters,
                          seed=args.seed)
    problem = InferenceProblem(system=system, grid=grid, hp=hp,
                               obs_times=obs.tau.points, obs_values=obs.values,
                               method="efigp", optimizer=cfg)
    n = grid.n
    sched_j = [j for j in args.schedule_eigen if j <= n]
    sched_l = [l for l in args.schedule_fourier if 2 * l - 1 <= n]
    out = stabilize_truncation(problem, sched_j, sched_l, stab_tol=args.stab_tol)
    payload = {
        "eigen": out.j,
        "fourier": out.l,
        "stable": out.stable,
        "theta_hat": out.result.theta_hat.tolist(),
        "history": [{"eigen": j, "fourier": l, "theta_hat": th.tolist()}
                    for j, l, th in out.history],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"stabilized at eigen={out.j} fourier={out.l} (stable={out.stable})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="efigp",
                                description="ODE inverse problems via "
                                            "eigen-Fourier GP inference")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a noisy observation CSV")
    s.add_argument("--system", required=True, choices=sorted(PROTOCOLS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="run MAP inference on an observation CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--system", required=True, choices=sorted(PROTOCOLS))
    s.add_argument("--method", default="efigp", choices=["efigp", "magi"])
    s.add_argument("--disc", type=int, default=161)
    s.add_argument("--eigen", type=int, default=None)
    s.add_argument("--fourier", type=int, default=None)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--max-iters", type=int, default=30_000)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--noise-sd", type=float, default=None,
                   help="fix the observation noise instead of fitting it")
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="score an inference result")
    s.add_argument("--result", required=True)
    s.add_argument("--system", default=None, choices=sorted(PROTOCOLS))
    s.add_argument("--out", required=True)
    s.add_argument("--trajectory-out", default=None)
    s.add_argument("--theta", type=_float_list, default=None,
                   help="override the inferred parameters (comma separated)")
    s.add_argument("--x0", type=_float_list, default=None,
                   help="override the inferred initial state")
    s.add_argument("--horizon", type=float, default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", help="run an experiment matrix")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("stabilize", help="grow truncation until theta stabilizes")
    s.add_argument("--data", required=True)
    s.add_argument("--system", required=True, choices=sorted(PROTOCOLS))
    s.add_argument("--disc", type=int, default=161)
    s.add_argument("--schedule-eigen", type=_int_list, default=[21, 41, 81, 161])
    s.add_argument("--schedule-fourier", type=_int_list, default=[11, 21, 41, 81])
    s.add_argument("--stab-tol", type=float, default=0.05)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--max-iters", type=int, default=30_000)
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stabilize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
