"""Command-line front end: ``mfd-dso <command> [options]``.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 CFL violation or
simulation fault, 4 file I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adjoint import gradient_check, write_gradcheck_csv
from .baselines import gap_baseline, msa_baseline
from .dynamics import SimulationFault, simulate_forward, write_flows_csv, write_trajectory_csv
from .network import compile_network
from .objective import average_cost, total_cost
from .optimizer import (OptimizerConfig, initial_assignment, optimize, write_convergence_csv)
from .presets import scenario_8region, scenario_chain4
from .projection import project_simplex_rows, qp_oracle
from .scenario import (DemandEntry, RateProfile, ScenarioError, TrapezoidProfile, load_scenario,
                       save_scenario, validate_scenario)

log = logging.getLogger("mfd_dso")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("simulate", "optimize", "baseline:msa", "baseline:gap", "gradcheck", "projcheck", "emit")
BUILTIN = {"8region": scenario_8region, "chain4": scenario_chain4}

METRIC_FIELDS = ("algorithm", "region", "max_accumulation", "avg_speed")
SUMMARY_FIELDS = ("algorithm", "J", "TTS", "TAC", "TC", "avg_cost", "arrived", "initial_J")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Reports


def region_metrics(traj):
    """Per region: peak accumulation and accumulation-weighted mean MFD speed.

    A region that is never occupied reports its free-flow speed.
    """
    net, cfg = traj.net, traj.net.config
    rows = []
    for i, r in enumerate(cfg.regions):
        n = np.asarray(traj.n_agg[:, i], dtype=float)
        curve = cfg.mfd[r]
        occupied = n > 0
        if curve.trip_length is None:
            speed = float("nan")
        elif occupied.any():
            v = curve.speed(n[occupied])
            speed = float((n[occupied] * v).sum() / n[occupied].sum())
        else:
            speed = float(curve.free_flow_speed)
        rows.append({"region": r, "max_accumulation": float(n.max()), "avg_speed": speed})
    return rows


def write_metrics_csv(tables, path):
    """``tables`` maps algorithm name to region_metrics rows."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_FIELDS)
        for alg, rows in tables.items():
            for row in rows:
                wr.writerow([alg, row["region"], f"{row['max_accumulation']:.6f}", f"{row['avg_speed']:.6f}"])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{"algorithm": r["algorithm"], "region": r["region"],
                 "max_accumulation": float(r["max_accumulation"]), "avg_speed": float(r["avg_speed"])}
                for r in csv.DictReader(fh)]


def summary_row(alg, traj, initial_J=None):
    cb = total_cost(traj)
    return {"algorithm": alg, "J": cb.total, "TTS": cb.tts, "TAC": cb.tac, "TC": cb.tc,
            "avg_cost": average_cost(cb, traj.net), "arrived": float(traj.arrived[-1]),
            "initial_J": cb.total if initial_J is None else initial_J}


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_FIELDS)
        for row in rows:
            wr.writerow([row["algorithm"]] + [f"{row[f]:.10g}" for f in SUMMARY_FIELDS[1:]])


# ---------------------------------------------------------------------------
# Scenario handling


def scale_demand(config, factor):
    """Multiply every demand total (and its profile) by ``factor``."""
    entries = []
    for e in config.demand.entries:
        prof = e.profile
        if isinstance(prof, TrapezoidProfile):
            prof = TrapezoidProfile(prof.total * factor, prof.window)
        elif isinstance(prof, RateProfile):
            prof = RateProfile(tuple(np.asarray(prof.rates) * factor), prof.dt)
        entries.append(DemandEntry(e.origin, e.destination, e.t_a, e.total * factor, prof))
    return replace(config, demand=replace(config.demand, entries=tuple(entries)))


def resolve_scenario(args):
    """Load ``--scenario`` (a JSON path or ``builtin:<name>``) and apply overrides."""
    spec = args.scenario or "builtin:8region"
    models = {}
    if args.flow_model:
        models["flow_model"] = {"kkt": "kkt_optimization"}.get(args.flow_model, args.flow_model)
    if args.origin_model:
        models["origin_model"] = {"queue": "homogeneous_queue"}.get(args.origin_model, args.origin_model)
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN:
            raise CliError(f"unknown built-in scenario {name!r} (choose from {', '.join(BUILTIN)})",
                           EXIT_INVALID)
        kw = dict(models)
        if name == "8region":
            kw["scale"] = args.scale if args.scale is not None else 1.0
        if args.dt is not None:
            kw["dt"] = args.dt
        config = BUILTIN[name](**kw)
        if name != "8region" and args.scale is not None:
            config = scale_demand(config, args.scale)
    else:
        try:
            config = load_scenario(spec)
        except FileNotFoundError as exc:
            raise CliError(f"scenario file not found: {spec}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"scenario file {spec} is not valid JSON: {exc}", EXIT_IO) from exc
        except OSError as exc:
            raise CliError(f"cannot read {spec}: {exc}", EXIT_IO) from exc
        if args.scale is not None:
            config = scale_demand(config, args.scale)
        if args.dt is not None:
            models["dt"] = args.dt
        if models:
            config = replace(config, **models)
    check_scenario(config)
    return config


def check_scenario(config):
    findings = validate_scenario(config)
    if not findings:
        return
    text = "\n".join(f"  {f}" for f in findings)
    code = EXIT_RUNTIME if all(f.code == "CFL" for f in findings) else EXIT_INVALID
    raise CliError(f"scenario rejected:\n{text}", code)


def prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}", EXIT_IO) from exc
    return out


# ---------------------------------------------------------------------------
# Commands


def _opt_config(args):
    return OptimizerConfig(max_iter=args.iters, seed=args.seed, early_stop=not args.no_early_stop)


def _run_algorithm(alg, config, iters, cfg):
    """Worker for one algorithm (module level so it can run in a subprocess)."""
    net = compile_network(config)
    if alg == "so":
        res = optimize(net, cfg)
    elif alg == "msa":
        res = msa_baseline(net, iters)
    else:
        res = gap_baseline(net, iters)
    traj = simulate_forward(net, res.controls)
    return alg, res.logs, summary_row(alg, traj, res.initial_J), region_metrics(traj)


def cmd_simulate(args, config, out):
    net = compile_network(config)
    controls = initial_assignment(net)
    traj = simulate_forward(net, controls)
    row = summary_row("initial", traj)
    write_summary_csv([row], out / "summary.csv")
    write_metrics_csv({"initial": region_metrics(traj)}, out / "metrics.csv")
    if args.trajectory:
        write_trajectory_csv(traj, out / "trajectory.csv", per_class=args.per_class, every=args.every)
        write_flows_csv(traj, out / "flows.csv", every=args.every)
    print(f"J = {row['J']:.6g} (TTS {row['TTS']:.6g}, TAC {row['TAC']:.6g}, TC {row['TC']:.6g}); "
          f"arrived {row['arrived']:.1f} of {net.total_demand:.1f}")


def cmd_optimize(args, config, out, algorithms):
    cfg = _opt_config(args)
    if len(algorithms) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(algorithms))) as pool:
            results = list(pool.map(_run_algorithm, algorithms, [config] * len(algorithms),
                                    [args.iters] * len(algorithms), [cfg] * len(algorithms)))
    else:
        results = [_run_algorithm(a, config, args.iters, cfg) for a in algorithms]
    logs = [entry for _, lg, _, _ in results for entry in lg]
    write_convergence_csv(logs, out / "convergence.csv")
    write_summary_csv([s for _, _, s, _ in results], out / "summary.csv")
    write_metrics_csv({alg: m for alg, _, _, m in results}, out / "metrics.csv")
    for alg, lg, s, _ in results:
        print(f"{alg}: J {s['initial_J']:.6g} -> {s['J']:.6g} in {len(lg)} iterations "
              f"(avg cost {s['avg_cost']:.4g})")


def cmd_gradcheck(args, config, out):
    net = compile_network(config)
    controls = initial_assignment(net)
    t0 = time.perf_counter()
    recs = gradient_check(net, controls, n=args.samples, seed=args.seed)
    write_gradcheck_csv(recs, out / "gradcheck.csv")
    smooth = [r for r in recs if not r.nonsmooth]
    worst = max((r.rel_error for r in smooth), default=0.0)
    print(f"{len(smooth)} regime-smooth components ({len(recs) - len(smooth)} skipped as nonsmooth); "
          f"max relative error {worst:.3e}; {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if worst < args.tol else EXIT_RUNTIME


def cmd_projcheck(args, out):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    rows = []
    for i in range(args.samples):
        m = int(rng.integers(2, 17))
        v = rng.normal(size=m)
        if i % 3 == 0:
            # repeated entries create zero-length segments of the root function
            v = rng.choice(np.round(rng.normal(size=3), 1), size=m)
        budget = 1.0 if i % 2 else float(rng.uniform(0.1, 5.0))
        err = float(np.abs(project_simplex_rows(v[None, :], budget)[0] - qp_oracle(v, budget)).max())
        worst = max(worst, err)
        rows.append((i, m, budget, err))
    with open(out / "projcheck.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["case", "dim", "budget", "max_abs_error"])
        wr.writerows((i, m, f"{b:.6g}", f"{e:.3e}") for i, m, b, e in rows)
    print(f"{args.samples} projections, max abs error vs oracle {worst:.3e}")
    return EXIT_OK if worst <= 1e-10 else EXIT_RUNTIME


def cmd_emit(args, out):
    kw = {"scale": args.scale if args.scale is not None else 1.0}
    if args.dt is not None:
        kw["dt"] = args.dt
    if args.flow_model:
        kw["flow_model"] = {"kkt": "kkt_optimization"}.get(args.flow_model, args.flow_model)
    if args.origin_model:
        kw["origin_model"] = {"queue": "homogeneous_queue"}.get(args.origin_model, args.origin_model)
    config = scenario_8region(**kw)
    check_scenario(config)
    save_scenario(config, out / "scenario.json")
    print(f"wrote {out / 'scenario.json'} ({config.demand.total:.0f} trips)")


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(prog="mfd-dso", description="MFD regional simulation and DSO solver")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", help="scenario JSON path or builtin:8region / builtin:chain4")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--scale", type=float, help="8-region homothety factor; demand factor for other scenarios")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--dt", type=float, help="time step override (s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flow-model", choices=("strada", "kkt"))
    p.add_argument("--origin-model", choices=("buffer", "queue"))
    p.add_argument("--compare", action="store_true", help="optimize: also run both baselines")
    p.add_argument("--jobs", type=int, default=3, help="parallel processes for --compare")
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--trajectory", action="store_true", help="simulate: write trajectory.csv and flows.csv")
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--every", type=int, default=1, help="row stride of trajectory output")
    p.add_argument("--samples", type=int, help="gradcheck/projcheck sample count")
    p.add_argument("--tol", type=float, default=1e-5, help="gradcheck relative error threshold")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _check_args(args):
    if args.iters < 1:
        raise CliError("--iters must be >= 1", EXIT_INVALID)
    if args.dt is not None and not args.dt > 0:
        raise CliError("--dt must be positive", EXIT_INVALID)
    if args.scale is not None and not args.scale > 0:
        raise CliError("--scale must be positive", EXIT_INVALID)
    if args.every < 1 or args.jobs < 1:
        raise CliError("--every and --jobs must be >= 1", EXIT_INVALID)
    if args.samples is None:
        args.samples = 200 if args.command == "gradcheck" else 10_000
    if args.samples < 1:
        raise CliError("--samples must be >= 1", EXIT_INVALID)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _check_args(args)
    out = prepare_out(args.out)
    if args.command == "emit":
        return cmd_emit(args, out) or EXIT_OK
    if args.command == "projcheck":
        return cmd_projcheck(args, out)
    if args.command == "gradcheck" and args.scenario is None:
        args.scenario = "builtin:chain4"
    config = resolve_scenario(args)
    if args.command == "simulate":
        cmd_simulate(args, config, out)
    elif args.command == "optimize":
        cmd_optimize(args, config, out, ["so", "msa", "gap"] if args.compare else ["so"])
    elif args.command.startswith("baseline:"):
        cmd_optimize(args, config, out, [args.command.split(":", 1)[1]])
    else:
        return cmd_gradcheck(args, config, out)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationFault as exc:
        print(f"error: simulation fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
