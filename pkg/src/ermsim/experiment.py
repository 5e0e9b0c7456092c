"""Run configured experiments and tabulate their response-time and movement statistics.

Seed ``s`` drives every random stream of a run: the synthetic workload is
``generate_synthetic(..., seed=s)``, the planner gets seed ``s`` and random
service times come from ``SeedSequence([s, 3])``.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .incidents import IncidentChain, IncidentEvent, RateMap, fit_rates, read_incidents
from .policies import MMCTSPolicy, QueuePolicy
from .queueing import ServiceModel
from .simulator import SimContext, SimResult, initial_state, no_rebalance, run, spread_placement
from .spatial import Depot, Grid, TravelModel, read_depots
from .synthetic import generate_synthetic, lattice_depots

SUMMARY_COLUMNS = ["identifier", "policy", "seeds", "count", "mean", "variance", "min", "q1", "median", "q3",
                   "max", "miles_mean", "miles_q1", "miles_median", "miles_q3"]


@dataclass
class Workload:
    rates: RateMap
    chain: IncidentChain


@dataclass
class RunReport:
    identifier: str
    policy: str
    seeds: list[int]
    count: int = 0
    mean: Optional[float] = None
    variance: Optional[float] = None  # population variance
    min: Optional[float] = None
    q1: Optional[float] = None
    median: Optional[float] = None
    q3: Optional[float] = None
    max: Optional[float] = None
    # mean miles per rebalanced agent at each step, pooled over seeds
    miles_mean: Optional[float] = None
    miles_q1: Optional[float] = None
    miles_median: Optional[float] = None
    miles_q3: Optional[float] = None
    response_csvs: list[str] = field(default_factory=list)
    rebalance_csvs: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in SUMMARY_COLUMNS}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


def world_of(cfg: ExperimentConfig) -> tuple[Grid, TravelModel, ServiceModel, tuple[Depot, ...]]:
    grid = Grid(cfg.grid_width, cfg.grid_height, cfg.cell_size)
    if cfg.depots_path:
        depots = read_depots(cfg.depots_path, grid)
    else:
        depots = lattice_depots(grid, cfg.n_depots, cfg.depot_capacity, seed=cfg.depot_seed)
    return grid, TravelModel(cfg.speed), ServiceModel.from_mean_minutes(cfg.service_minutes), depots


def workload(cfg: ExperimentConfig, seed: int, grid: Grid) -> Workload:
    """Rates fitted on the training window and the evaluation chain that follows it."""
    end = cfg.train_minutes + cfg.eval_minutes
    if cfg.incidents_path:
        history = read_incidents(cfg.incidents_path, grid)
    else:
        history = generate_synthetic(grid, cfg.n_hotspots, cfg.base_rate, cfg.hotspot_rate, end, seed)
    train = [ev for ev in history if ev.time < cfg.train_minutes]
    evaluate = tuple(ev for ev in history if cfg.train_minutes <= ev.time < end)
    return Workload(fit_rates(train, grid, cfg.train_minutes), IncidentChain(evaluate, cfg.train_minutes, end))


def make_policy(cfg: ExperimentConfig, rates: RateMap, seed: int, truth: Sequence[IncidentEvent]):
    if cfg.policy == "none":
        return no_rebalance
    if cfg.policy == "queue":
        return QueuePolicy(rates, cfg.roi)
    pcfg = cfg.planner_config()
    if cfg.oracle:
        pcfg.n_chains = 1
    return MMCTSPolicy(rates, pcfg, seed, ground_truth=list(truth) if cfg.oracle else None)


def simulate_seed(cfg: ExperimentConfig, seed: int) -> SimResult:
    grid, tm, sm, depots = world_of(cfg)
    wl = workload(cfg, seed, grid)
    ctx = SimContext(grid, tm, sm, depots, exponential_service=cfg.exponential_service,
                     post_service=cfg.post_service, rng=np.random.default_rng(np.random.SeedSequence([seed, 3])))
    state = initial_state(depots, spread_placement(depots, cfg.fleet_size), wl.chain.start)
    policy = make_policy(cfg, wl.rates, seed, wl.chain.events)
    return run(state, policy, wl.chain, cfg.rebalance_min, ctx)


def response_stats(values: np.ndarray) -> dict:
    if len(values) == 0:
        return {"count": 0}
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"count": int(len(values)), "mean": float(values.mean()), "variance": float(values.var()),
            "min": float(values.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(values.max())}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Run ``cfg`` once per seed and pool the results into one report."""
    t0 = time.perf_counter()
    report = RunReport(cfg.identifier, cfg.policy, list(cfg.seeds))
    target = None
    if out_dir is not None:
        target = Path(out_dir) / cfg.identifier
        target.mkdir(parents=True, exist_ok=True)
        cfg.save(target / "config.txt")
    responses, miles = [], []
    for seed in cfg.seeds:
        result = simulate_seed(cfg, seed)
        responses.append(result.response_times())
        miles.extend(result.step_mean_miles())
        if target is not None:
            rp, mp = target / f"responses_seed{seed}.csv", target / f"rebalance_seed{seed}.csv"
            result.write_responses(rp)
            result.write_moves(mp)
            report.response_csvs.append(str(rp))
            report.rebalance_csvs.append(str(mp))
    for k, v in response_stats(np.concatenate(responses) if responses else np.array([])).items():
        setattr(report, k, v)
    if cfg.policy != "none":
        m = np.array(miles) if miles else np.zeros(1)
        report.miles_mean = float(m.mean())
        report.miles_q1, report.miles_median, report.miles_q3 = (float(x) for x in np.percentile(m, [25, 50, 75]))
    report.seconds = time.perf_counter() - t0
    if target is not None:
        report.save(target / "report.json")
    return report


def _run_one(args):
    cfg, out_dir = args
    return run_experiment(cfg, out_dir)


def run_grid(configs: Iterable[ExperimentConfig], out_dir: str | Path | None = None, jobs: int = 1) -> list[RunReport]:
    """Run several experiments, in worker processes when ``jobs > 1``."""
    work = [(cfg, out_dir) for cfg in configs]
    if jobs <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def summarize(reports: Sequence[RunReport], csv_path: str | Path | None = None) -> str:
    """Comparison table, one row per identifier in sorted order; also written as CSV if asked."""
    if not reports:
        raise ValueError("nothing to summarize")
    rows = [[_cell(v) for v in r.row().values()] for r in sorted(reports, key=lambda r: r.identifier)]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            w.writerows(rows)
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(SUMMARY_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(SUMMARY_COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(line.rstrip() for line in lines)
