"""Command line entry point: ``ermsim <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, experiment_grid
from .experiment import RunReport, run_experiment, run_grid, summarize
from .incidents import fit_rates, read_incidents, write_rates
from .spatial import Grid, write_depots
from .synthetic import generate_synthetic, lattice_depots

# flag -> config attribute
OVERRIDES = {
    "identifier": "identifier",
    "policy": "policy",
    "fleet_size": "fleet_size",
    "seeds": "seeds",
    "incidents": "incidents_path",
    "depots": "depots_path",
    "train_min": "train_minutes",
    "eval_min": "eval_minutes",
    "service_min": "service_minutes",
    "post_service": "post_service",
    "iterations": "iterations",
    "horizon_min": "horizon_min",
    "psi": "psi",
    "alpha": "alpha",
    "rebalance_min": "rebalance_min",
    "chains": "chains",
    "other_agent_policy": "other_agent_policy",
    "oracle": "oracle",
    "roi": "roi",
}


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--identifier")
    p.add_argument("--policy", choices=["none", "queue", "mmcts"])
    p.add_argument("--fleet-size", type=int)
    p.add_argument("--seeds", type=_seed_list, help="e.g. 0,1,2")
    p.add_argument("--incidents", help="incident history CSV (default: synthetic per seed)")
    p.add_argument("--depots", help="depot CSV (default: generated lattice)")
    p.add_argument("--train-min", type=float)
    p.add_argument("--eval-min", type=float)
    p.add_argument("--service-min", type=float)
    p.add_argument("--post-service", choices=["return", "idle"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--horizon-min", type=float)
    p.add_argument("--psi", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rebalance-min", type=float)
    p.add_argument("--chains", type=int)
    p.add_argument("--other-agent-policy", choices=["static", "queue"])
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--roi", type=float)
    p.add_argument("--out", type=Path, help="output directory")


def _flag_changes(args: argparse.Namespace, skip=()) -> dict:
    return {attr: getattr(args, flag) for flag, attr in OVERRIDES.items()
            if flag not in skip and getattr(args, flag) is not None}


def config_from_args(args: argparse.Namespace, preset: str | None = None) -> ExperimentConfig:
    """Config file (or defaults), then the named experiment's own settings, then explicit flags."""
    cfg = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    if preset is not None:
        cfg = experiment_grid(cfg)[preset]
    return cfg.replace(**_flag_changes(args))


def cmd_gen_data(args) -> int:
    grid = Grid(args.width, args.height, args.cell_size)
    events = generate_synthetic(grid, args.hotspots, args.base_rate, args.hotspot_rate, args.duration, args.seed,
                                args.out)
    print(f"wrote {len(events)} incidents to {args.out}")
    if args.depots_out:
        write_depots(args.depots_out, lattice_depots(grid, args.n_depots, args.capacity, seed=args.seed), grid)
        print(f"wrote {args.n_depots} depots to {args.depots_out}")
    return 0


def cmd_fit(args) -> int:
    grid = Grid(args.width, args.height, args.cell_size)
    history = [ev for ev in read_incidents(args.incidents, grid) if ev.time < args.duration]
    rates = fit_rates(history, grid, args.duration)
    write_rates(args.out, rates, grid)
    print(f"fitted {len(history)} incidents over {args.duration:g} min: total rate {rates.total:.6g}/min")
    return 0


def cmd_simulate(args) -> int:
    cfg = config_from_args(args, args.preset)
    report = run_experiment(cfg, args.out)
    print(summarize([report]))
    return 0


def cmd_experiment(args) -> int:
    base = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    grid = experiment_grid(base)
    names = args.only or sorted(grid)
    unknown = [n for n in names if n not in grid]
    if unknown:
        raise ConfigError(f"unknown experiment identifiers: {', '.join(unknown)}")
    # explicit flags win over the per-run settings, except the ones that define a run
    changes = _flag_changes(args, skip=("identifier", "policy"))
    out = args.out or Path("results")
    reports = run_grid([grid[n].replace(**changes) for n in names], out, args.jobs)
    print(summarize(reports, out / "summary.csv"))
    return 0


def cmd_summarize(args) -> int:
    paths = []
    for p in args.paths:
        paths.extend(sorted(p.rglob("report.json")) if p.is_dir() else [p])
    if not paths:
        print("no report.json files found", file=sys.stderr)
        return 1
    print(summarize([RunReport.load(p) for p in paths], args.csv))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ermsim", description="Responder rebalancing simulations")
    sub = ap.add_subparsers(dest="command", required=True)

    def grid_flags(p):
        p.add_argument("--width", type=int, default=30)
        p.add_argument("--height", type=int, default=30)
        p.add_argument("--cell-size", type=float, default=1.0)

    p = sub.add_parser("gen-data", help="write a synthetic hotspot incident history")
    grid_flags(p)
    p.add_argument("--hotspots", type=int, default=10)
    p.add_argument("--base-rate", type=float, default=2e-4, help="incidents/min per ordinary cell")
    p.add_argument("--hotspot-rate", type=float, default=5e-3, help="incidents/min per hotspot cell")
    p.add_argument("--duration", type=float, default=30 * 1440.0 + 2400.0, help="minutes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--depots-out", type=Path, help="also write a lattice depot layout")
    p.add_argument("--n-depots", type=int, default=30)
    p.add_argument("--capacity", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", help="fit per-cell incident rates from a history CSV")
    grid_flags(p)
    p.add_argument("--incidents", type=Path, required=True)
    p.add_argument("--duration", type=float, required=True, help="training window [0, duration) in minutes")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run one configuration")
    p.add_argument("--preset", choices=sorted(experiment_grid()), help="start from a named experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run the named experiment grid",
                       description="Runs the named experiments. Flags override every selected run; "
                                   "--identifier and --policy are ignored here.")
    _add_config_flags(p)
    p.add_argument("--only", nargs="+", metavar="ID", help="run just these identifiers")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("summarize", help="tabulate saved reports")
    p.add_argument("paths", nargs="+", type=Path, help="report.json files or directories holding them")
    p.add_argument("--csv", type=Path, help="also write the table as CSV")
    p.set_defaults(func=cmd_summarize)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"ermsim: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
