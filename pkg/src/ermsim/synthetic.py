"""Synthetic workloads: hotspot incident mixtures and lattice depot layouts."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .incidents import IncidentEvent, RateMap, sample_chain, write_incidents
from .spatial import Depot, Grid, validate_depots


def hotspot_rates(grid: Grid, n_hotspots: int, base_rate: float, hotspot_rate: float, seed: int) -> tuple[RateMap, list[int]]:
    """Uniform background rate with ``n_hotspots`` random cells raised to ``hotspot_rate``."""
    if base_rate < 0 or hotspot_rate < 0:
        raise ValueError("rates must be nonnegative")
    if n_hotspots > grid.n_cells:
        raise ValueError("more hotspots than cells")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    hot = sorted(int(c) for c in rng.choice(grid.n_cells, size=n_hotspots, replace=False))
    rates = np.full(grid.n_cells, float(base_rate))
    rates[hot] = hotspot_rate
    return RateMap(rates, 0.0), hot


def generate_synthetic(
    grid: Grid,
    n_hotspots: int,
    base_rate: float,
    hotspot_rate: float,
    duration: float,
    seed: int,
    path: str | Path | None = None,
) -> list[IncidentEvent]:
    """Sample an incident history over ``[0, duration)``; optionally write it as CSV."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    rates, _ = hotspot_rates(grid, n_hotspots, base_rate, hotspot_rate, seed)
    events = list(sample_chain(rates, 0.0, duration, np.random.SeedSequence([seed, 2])).events)
    if path is not None:
        write_incidents(path, events, grid)
    return events


def lattice_depots(grid: Grid, n_depots: int, capacity: int = 1, seed: int = 0, jitter: int = 1) -> tuple[Depot, ...]:
    """Depots near the centres of a near-square lattice of blocks, each nudged by up to ``jitter`` cells."""
    cols = max(1, int(round(np.sqrt(n_depots * grid.width / grid.height))))
    rows = int(np.ceil(n_depots / cols))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    cells: list[int] = []
    for k in range(rows * cols):
        if len(cells) == n_depots:
            break
        r, c = divmod(k, cols)
        x = int((c + 0.5) * grid.width / cols) + int(rng.integers(-jitter, jitter + 1))
        y = int((r + 0.5) * grid.height / rows) + int(rng.integers(-jitter, jitter + 1))
        cell = grid.cell_id(min(max(x, 0), grid.width - 1), min(max(y, 0), grid.height - 1))
        if cell not in cells:
            cells.append(cell)
    free = [c for c in range(grid.n_cells) if c not in cells]
    while len(cells) < n_depots:
        cells.append(free.pop(int(rng.integers(len(free)))))
    return validate_depots([Depot(i, cell, capacity) for i, cell in enumerate(cells)], grid)
