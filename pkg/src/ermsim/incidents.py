"""Incident arrival model: per-cell homogeneous Poisson rates, sampled and oracle chains."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .spatial import Grid, GeometryError

INCIDENT_HEADER = ["incident_id", "time_min", "cell_x", "cell_y"]

# separation applied to coincident event times (minutes)
TIE_EPSILON = 1e-6


@dataclass(frozen=True, order=True)
class IncidentEvent:
    time: float
    cell: int
    id: int


@dataclass
class RateMap:
    """Incidents per minute for every cell, indexed by cell id."""

    rate_per_cell: np.ndarray
    trained_duration: float

    def __post_init__(self):
        self.rate_per_cell = np.asarray(self.rate_per_cell, dtype=float)
        if np.any(~np.isfinite(self.rate_per_cell)) or np.any(self.rate_per_cell < 0):
            raise ValueError("rates must be finite and nonnegative")

    @property
    def total(self) -> float:
        return float(self.rate_per_cell.sum())

    def __add__(self, other: "RateMap") -> "RateMap":
        return RateMap(self.rate_per_cell + other.rate_per_cell, min(self.trained_duration, other.trained_duration))


@dataclass(frozen=True)
class IncidentChain:
    events: tuple[IncidentEvent, ...]
    start: float
    end: float

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def separate_ties(times: np.ndarray, eps: float = TIE_EPSILON) -> np.ndarray:
    """Nudge sorted times so they become strictly increasing."""
    out = np.array(times, dtype=float)
    for i in range(1, len(out)):
        if out[i] <= out[i - 1]:
            out[i] = out[i - 1] + eps
    return out


def fit_rates(history: Iterable[IncidentEvent], grid: Grid, duration: float) -> RateMap:
    """Poisson maximum-likelihood rates: event count per cell over ``duration`` minutes."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    counts = np.zeros(grid.n_cells)
    for ev in history:
        counts[grid.check(ev.cell)] += 1
    return RateMap(counts / duration, float(duration))


def sample_chain(rates: RateMap, start: float, horizon: float, seed: int | np.random.SeedSequence) -> IncidentChain:
    """Draw independent exponential inter-arrival streams per cell and merge them.

    Ids are assigned 0..n-1 in time order. The result depends only on ``seed``.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    rng = np.random.default_rng(seed)
    times: list[np.ndarray] = []
    cells: list[np.ndarray] = []
    for cell in np.flatnonzero(rates.rate_per_cell > 0):
        rate = rates.rate_per_cell[cell]
        mean = rate * horizon
        batch = int(mean + 6.0 * np.sqrt(mean) + 10)
        arrivals = np.cumsum(rng.exponential(1.0 / rate, size=batch))
        while arrivals[-1] < horizon:
            more = arrivals[-1] + np.cumsum(rng.exponential(1.0 / rate, size=batch))
            arrivals = np.concatenate([arrivals, more])
        arrivals = arrivals[arrivals < horizon]
        times.append(arrivals)
        cells.append(np.full(len(arrivals), cell, dtype=int))
    if not times:
        return IncidentChain((), float(start), float(start + horizon))
    t = np.concatenate(times)
    c = np.concatenate(cells)
    order = np.lexsort((c, t))
    t = separate_ties(start + t[order])
    c = c[order]
    keep = t < start + horizon
    events = tuple(IncidentEvent(float(ti), int(ci), i) for i, (ti, ci) in enumerate(zip(t[keep], c[keep])))
    return IncidentChain(events, float(start), float(start + horizon))


def oracle_chain(ground_truth: Sequence[IncidentEvent], start: float, horizon: float) -> IncidentChain:
    """The true events inside ``[start, start + horizon)``; ``ground_truth`` must be time-sorted."""
    times = [ev.time for ev in ground_truth]
    lo = bisect.bisect_left(times, start)
    hi = bisect.bisect_left(times, start + horizon)
    return IncidentChain(tuple(ground_truth[lo:hi]), float(start), float(start + horizon))


def read_incidents(path: str | Path, grid: Grid) -> list[IncidentEvent]:
    """Load an incident CSV, sorted by time with coincident times separated."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INCIDENT_HEADER:
            raise GeometryError(f"{path}: expected header {','.join(INCIDENT_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            t = float(row["time_min"])
            if not t >= 0:
                raise ValueError(f"{path}:{lineno}: negative or invalid time {row['time_min']!r}")
            rows.append((t, grid.cell_id(int(row["cell_x"]), int(row["cell_y"])), int(row["incident_id"])))
    rows.sort()
    ids = [r[2] for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate incident ids")
    times = separate_ties(np.array([r[0] for r in rows]))
    return [IncidentEvent(float(t), c, i) for t, (_, c, i) in zip(times, rows)]


def write_incidents(path: str | Path, events: Iterable[IncidentEvent], grid: Grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INCIDENT_HEADER)
        for ev in events:
            x, y = grid.coords(ev.cell)
            w.writerow([ev.id, repr(float(ev.time)), x, y])


def write_rates(path: str | Path, rates: RateMap, grid: Grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "rate_per_min"])
        for cell, r in enumerate(rates.rate_per_cell):
            x, y = grid.coords(cell)
            w.writerow([x, y, repr(float(r))])
