"""Service-area geometry: square-cell grid, depots and Euclidean travel."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEPOT_HEADER = ["depot_id", "cell_x", "cell_y", "capacity"]


class GeometryError(ValueError):
    """Raised for invalid cells, grids or depots."""


@dataclass(frozen=True)
class Grid:
    width: int
    height: int
    cell_size: float = 1.0  # miles per cell edge

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.cell_size > 0:
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def check(self, cell: int) -> int:
        if not 0 <= cell < self.n_cells:
            raise GeometryError(f"cell {cell} outside {self.width}x{self.height} grid")
        return cell

    def cell_id(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise GeometryError(f"cell ({x}, {y}) outside {self.width}x{self.height} grid")
        return y * self.width + x

    def coords(self, cell: int) -> tuple[int, int]:
        self.check(cell)
        return cell % self.width, cell // self.width

    def centroid(self, cell: int) -> tuple[float, float]:
        x, y = self.coords(cell)
        return (x + 0.5) * self.cell_size, (y + 0.5) * self.cell_size

    def centroids(self) -> np.ndarray:
        """(n_cells, 2) array of centroids in miles, indexed by cell id."""
        ids = np.arange(self.n_cells)
        xs = (ids % self.width + 0.5) * self.cell_size
        ys = (ids // self.width + 0.5) * self.cell_size
        return np.column_stack([xs, ys])


@dataclass(frozen=True)
class Depot:
    id: int
    cell: int
    capacity: int = 1

    def __post_init__(self):
        if self.capacity < 1:
            raise GeometryError(f"depot {self.id} capacity must be >= 1, got {self.capacity}")


@dataclass(frozen=True)
class TravelModel:
    speed: float = 0.5  # miles per minute

    def __post_init__(self):
        if not self.speed > 0:
            raise GeometryError(f"speed must be positive, got {self.speed}")


def distance(a: int, b: int, grid: Grid) -> float:
    """Euclidean distance in miles between the centroids of cells ``a`` and ``b``."""
    grid.check(a)
    grid.check(b)
    ax, ay = a % grid.width, a // grid.width
    bx, by = b % grid.width, b // grid.width
    return math.hypot(ax - bx, ay - by) * grid.cell_size


def travel_time(a: int, b: int, grid: Grid, tm: TravelModel) -> float:
    """Minutes needed to drive from cell ``a`` to cell ``b``."""
    return distance(a, b, grid) / tm.speed


def distance_matrix(sources: Sequence[int], targets: Sequence[int] | None, grid: Grid) -> np.ndarray:
    """Pairwise centroid distances, shape (len(sources), len(targets))."""
    # integer cell offsets keep mirror-image pairs exactly equal
    src = np.asarray(sources, dtype=int)
    dst = np.arange(grid.n_cells) if targets is None else np.asarray(targets, dtype=int)
    dx = src[:, None] % grid.width - dst[None, :] % grid.width
    dy = src[:, None] // grid.width - dst[None, :] // grid.width
    return np.hypot(dx, dy) * grid.cell_size


def validate_depots(depots: Iterable[Depot], grid: Grid) -> tuple[Depot, ...]:
    depots = tuple(sorted(depots, key=lambda d: d.id))
    ids = [d.id for d in depots]
    if len(set(ids)) != len(ids):
        raise GeometryError("duplicate depot ids")
    cells = [d.cell for d in depots]
    if len(set(cells)) != len(cells):
        raise GeometryError("two depots share a cell")
    for d in depots:
        grid.check(d.cell)
    return depots


def read_depots(path: str | Path, grid: Grid) -> tuple[Depot, ...]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DEPOT_HEADER:
            raise GeometryError(f"{path}: expected header {','.join(DEPOT_HEADER)}")
        depots = [
            Depot(int(row["depot_id"]), grid.cell_id(int(row["cell_x"]), int(row["cell_y"])), int(row["capacity"]))
            for row in reader
        ]
    return validate_depots(depots, grid)


def write_depots(path: str | Path, depots: Iterable[Depot], grid: Grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEPOT_HEADER)
        for d in sorted(depots, key=lambda d: d.id):
            x, y = grid.coords(d.cell)
            w.writerow([d.id, x, y, d.capacity])
