"""Command-line interface.

Subcommands cover training both neural schemes, running the classical
solver, comparing surfaces, reconstructing equilibrium flows, the
sampling-rate study and figure-data export.  Exit codes: 0 on success,
1 on runtime failure, 2 on usage or configuration errors.
"""

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, evaluation as ev
from .dbme import DbmeSolution, train_dbme
from .dgme import train_dgme
from .errors import ConfigError, MfgError
from .nets import NeuralSurface
from .ode import TimeGrid, solve_mfg_system

OUTPUT_DIR_ENV = "MFGMASTER_OUTPUT_DIR"


def parse_eta(text, d=None):
    """Comma-separated probability vector; sum must be within 1e-10 of 1."""
    try:
        eta = np.array([float(part) for part in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse distribution {text!r}")
    if d is not None and eta.size != d:
        raise ConfigError(f"distribution has {eta.size} entries, expected {d}")
    if np.any(eta < 0):
        raise ConfigError("distribution entries must be nonnegative")
    if abs(eta.sum() - 1.0) > 1e-10:
        raise ConfigError(f"distribution sums to {eta.sum():.12g}, not 1")
    return eta / eta.sum()


def _output_dir(args):
    out = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(outdir, command, flat_config, seed, extra=None):
    manifest = {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": seed,
        "config_hash": cfgmod.config_hash(flat_config) if flat_config else None,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(np.asarray(trace, dtype=float)):
            w.writerow([i, f"{v:.17g}"])


def _load_flat(args):
    flat = cfgmod.load_config(args.config)
    run = cfgmod.run_options(flat)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    return flat, run, int(seed)


def _surface_from_spec(kind, checkpoint, model, oracle_opts):
    if kind == "oracle":
        return ev.OracleSurface(model, **oracle_opts)
    if kind == "dgme":
        if checkpoint is None:
            raise ConfigError("dgme surface needs a checkpoint path")
        return ev.DgmeSurface(NeuralSurface.load(checkpoint))
    if kind == "dbme":
        if checkpoint is None:
            raise ConfigError("dbme surface needs a checkpoint directory")
        return ev.DbmeSurface(DbmeSolution.load(checkpoint, model))
    raise ConfigError(f"unknown surface kind {kind!r}")


def cmd_train_dgme(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    cfg = cfgmod.make_dgme_config(flat, seed=seed)
    if args.seed is not None:
        cfg.seed = args.seed
    outdir = _output_dir(args)
    t0 = time.time()
    result = train_dgme(model, cfg)
    elapsed = time.time() - t0
    result.net.save(outdir / "dgme_net.ckpt")
    _write_trace(outdir / "dgme_trace.csv", result.loss_trace)
    _write_manifest(outdir, "train-dgme", flat, cfg.seed, {
        "holdout_loss": result.holdout_loss,
        "seconds": round(elapsed, 3),
    })
    print(f"holdout max-loss {result.holdout_loss:.6g} "
          f"({elapsed:.1f}s, saved to {outdir})")


def cmd_train_dbme(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    cfg = cfgmod.make_dbme_config(flat, seed=seed)
    if args.seed is not None:
        cfg.seed = args.seed
    outdir = _output_dir(args)
    t0 = time.time()
    solution = train_dbme(model, cfg)
    elapsed = time.time() - t0
    solution.save(outdir / "dbme_solution")
    if solution.loss_traces is not None:
        _write_trace(outdir / "dbme_trace.csv",
                     np.concatenate([np.atleast_1d(tr)
                                     for tr in solution.loss_traces]))
    _write_manifest(outdir, "train-dbme", flat, cfg.seed, {
        "eps_max": solution.eps_max,
        "epsilons": [float(e) for e in solution.epsilons],
        "seconds": round(elapsed, 3),
    })
    print(f"max step error {solution.eps_max:.6g} "
          f"({elapsed:.1f}s, saved to {outdir})")


def cmd_solve_oracle(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    opts = cfgmod.oracle_options(flat)
    eta = parse_eta(args.eta, model.d)
    n_steps = opts.pop("n_steps", 100)
    t0 = args.t0
    if t0 >= model.horizon:
        raise ConfigError("start time must be below the horizon")
    steps = max(2, int(round(n_steps * (model.horizon - t0) / model.horizon)))
    grid = TimeGrid.uniform(steps, model.horizon, t_start=t0)
    traj = solve_mfg_system(model, t0, eta, grid, **opts)
    outdir = _output_dir(args)
    traj.to_csv(outdir / "oracle_trajectory.csv")
    _write_manifest(outdir, "solve-oracle", flat, seed, {
        "t0": t0, "eta": [float(v) for v in eta],
        "u_t0": [float(v) for v in traj.values_u[0]],
    })
    print("u(t0) =", np.array2string(traj.values_u[0], precision=8))


def cmd_compare(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    opts = cfgmod.oracle_options(flat)
    a = _surface_from_spec(args.method_a, args.checkpoint_a, model, opts)
    b = _surface_from_spec(args.method_b, args.checkpoint_b, model, opts)
    times = [float(part) for part in args.times.split(",")]
    report = ev.compare_surfaces(a, b, model, times,
                                 n_samples=args.samples, seed=seed)
    outdir = _output_dir(args)
    report.to_csv(outdir / "comparison.csv")
    _write_manifest(outdir, "compare", flat, seed, {
        "method_a": args.method_a, "method_b": args.method_b,
        "sup_abs": float(np.max(report.sup_abs)),
    })
    print(f"sup |a-b| over all times: {np.max(report.sup_abs):.6g}")


def cmd_reconstruct(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    opts = cfgmod.oracle_options(flat)
    surface = _surface_from_spec(args.surface, args.checkpoint, model, opts)
    eta = parse_eta(args.eta, model.d)
    grid = TimeGrid.uniform(args.steps, model.horizon)
    traj = ev.reconstruct_equilibrium(surface, model, eta, grid)
    outdir = _output_dir(args)
    traj.to_csv(outdir / "reconstruction.csv")
    _write_manifest(outdir, "reconstruct", flat, seed, {
        "surface": args.surface, "eta": [float(v) for v in eta],
    })
    print(f"wrote {outdir / 'reconstruction.csv'}")


def cmd_sample_study(args):
    k_list = [int(part) for part in args.k_list.split(",")]
    means, slope = ev.sampling_rate_study(args.d, k_list,
                                          trials=args.trials, seed=args.seed or 0)
    outdir = _output_dir(args)
    with open(outdir / "sample_study.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "mean_min_norm"])
        for K, m in zip(k_list, means):
            w.writerow([K, f"{m:.17g}"])
    _write_manifest(outdir, "sample-study", None, args.seed or 0, {
        "d": args.d, "slope": slope, "expected_slope": -1.0 / (args.d - 1),
    })
    print(f"fitted slope {slope:.4f} (theory {-1.0 / (args.d - 1):.4f})")


def cmd_export(args):
    flat, run, seed = _load_flat(args)
    model = cfgmod.make_model(flat)
    opts = cfgmod.oracle_options(flat)
    outdir = _output_dir(args)
    kwargs = {}
    if args.kind in ("d2-lines", "d3-simplex-heat"):
        kwargs["surface"] = _surface_from_spec(args.surface, args.checkpoint,
                                               model, opts)
    if args.kind == "d2-lines":
        if model.d != 2:
            raise ConfigError("d2-lines export needs a two-state model")
        kwargs["times"] = [float(p) for p in args.times.split(",")]
    elif args.kind == "d3-simplex-heat":
        if model.d != 3:
            raise ConfigError("d3-simplex-heat export needs a three-state model")
        kwargs["t"] = args.t
        kwargs["x"] = args.x
    elif args.kind == "loss-curves":
        trace = np.array([float(row[1]) for row in
                          csv.reader(open(args.trace))][1:])
        kwargs["trace"] = trace
    else:
        raise ConfigError(
            f"export kind {args.kind!r} is not available from the CLI"
        )
    path = ev.export_figure_data(args.kind, outdir / f"{args.kind}.csv",
                                 **kwargs)
    _write_manifest(outdir, "export", flat, seed, {"kind": args.kind})
    print(f"wrote {path}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfgmaster",
        description="Neural and classical solvers for finite-state "
                    "mean-field-game master equations.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="key=value configuration file")
        p.add_argument("--output-dir", default=None,
                       help=f"output directory (default ${OUTPUT_DIR_ENV} "
                            "or the working directory)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap (default 1, deterministic)")

    p = sub.add_parser("train-dgme", help="train the space-time network")
    common(p)
    p.set_defaults(func=cmd_train_dgme)

    p = sub.add_parser("train-dbme", help="train the backward network family")
    common(p)
    p.set_defaults(func=cmd_train_dbme)

    p = sub.add_parser("solve-oracle",
                       help="classical forward-backward solve from (t0, eta)")
    common(p)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--eta", required=True,
                   help="comma-separated initial distribution")
    p.set_defaults(func=cmd_solve_oracle)

    p = sub.add_parser("compare", help="compare two value surfaces")
    common(p)
    p.add_argument("--method-a", required=True,
                   choices=("oracle", "dgme", "dbme"))
    p.add_argument("--method-b", required=True,
                   choices=("oracle", "dgme", "dbme"))
    p.add_argument("--checkpoint-a", default=None)
    p.add_argument("--checkpoint-b", default=None)
    p.add_argument("--times", required=True,
                   help="comma-separated evaluation times")
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reconstruct",
                       help="equilibrium flow induced by a value surface")
    common(p)
    p.add_argument("--surface", required=True,
                   choices=("oracle", "dgme", "dbme"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--eta", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample-study",
                       help="Monte Carlo decay rate of sampled-max coverage")
    common(p, needs_config=False)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k-list", required=True,
                   help="comma-separated sample counts")
    p.add_argument("--trials", type=int, default=100000)
    p.set_defaults(func=cmd_sample_study)

    p = sub.add_parser("export", help="write plot-ready CSV data")
    common(p)
    p.add_argument("--kind", required=True,
                   choices=("d2-lines", "d3-simplex-heat", "loss-curves"))
    p.add_argument("--surface", default="oracle",
                   choices=("oracle", "dgme", "dbme"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--times", default="0.0")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x", type=int, default=0)
    p.add_argument("--trace", default=None, help="loss trace CSV to rebin")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MfgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
