"""Queue-based responder placement.

Each cell's incident rate is split across the occupied depots near it in
inverse proportion to distance; every (depot, cell) stream is then scored as
an M/M/c queue plus the travel time from depot to cell, and responders are
placed one at a time on whichever depot lowers the total score the most.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .incidents import RateMap
from .spatial import Depot, Grid, TravelModel, distance_matrix

Occupancy = dict[int, int]

# relative score difference below which two greedy candidates are tied
TIE_TOLERANCE = 1e-12


class SaturationError(ArithmeticError):
    """Arrival rate meets or exceeds service capacity; the queue is unstable."""


@dataclass(frozen=True)
class ServiceModel:
    mu: float  # completions per minute per responder

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")

    @classmethod
    def from_mean_minutes(cls, minutes: float) -> "ServiceModel":
        return cls(1.0 / minutes)

    @property
    def mean_minutes(self) -> float:
        return 1.0 / self.mu


def erlang_wait_factor(c: int, q: float) -> float:
    """Probability an arrival waits in an M/M/c queue with utilization ``q``.

    Evaluated in the product form
    1 / (1 + (1 - q) * c!/(cq)^c * sum_{k<c} (cq)^k/k!)
    with the factorial ratio expanded as a running product, so large ``c``
    does not overflow. Defined as 0 at ``q == 0``.
    """
    if c < 1:
        raise ValueError(f"server count must be >= 1, got {c}")
    if q < 0:
        raise ValueError(f"utilization must be >= 0, got {q}")
    if q >= 1:
        raise SaturationError(f"utilization {q} >= 1 with {c} servers")
    if q == 0:
        return 0.0
    a = c * q
    term = 1.0
    acc = 0.0
    for j in range(c):
        term *= (c - j) / a
        acc += term
    return 1.0 / (1.0 + (1.0 - q) * acc)


def _wait_factor_array(c: int, q: np.ndarray) -> np.ndarray:
    # vectorized erlang_wait_factor for q in [0, 1)
    a = c * q
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        term = np.ones_like(q)
        acc = np.zeros_like(q)
        for j in range(c):
            term = term * (c - j) / a
            acc = acc + term
        out = 1.0 / (1.0 + (1.0 - q) * acc)
    return np.where(q > 0, out, 0.0)


def response_time(c: int, upsilon: float, sm: ServiceModel) -> float:
    """Expected sojourn (wait + service) minutes for ``c`` servers at arrival rate ``upsilon``."""
    if upsilon < 0:
        raise ValueError(f"arrival rate must be >= 0, got {upsilon}")
    q = upsilon / (c * sm.mu)
    omega = erlang_wait_factor(c, q)
    return omega / (c * sm.mu - upsilon) + 1.0 / sm.mu


def joint_assignment_count(n_depots: int, n_agents: int) -> int:
    """Number of ways to place distinguishable agents on unit-capacity depots."""
    return math.perm(n_depots, n_agents)


class DepotGeometry:
    """Depot-to-cell distance tables shared by the scoring routines."""

    def __init__(self, grid: Grid, depots: Sequence[Depot]):
        self.grid = grid
        self.depots = tuple(sorted(depots, key=lambda d: d.id))
        self.ids = [d.id for d in self.depots]
        self.index = {d.id: i for i, d in enumerate(self.depots)}
        self.capacity = np.array([d.capacity for d in self.depots], dtype=int)
        self.dist = distance_matrix([d.cell for d in self.depots], None, grid)
        # a depot inside the cell counts as half a cell edge away when inverting
        self.split_dist = np.maximum(self.dist, 0.5 * grid.cell_size)
        self.inv_dist = 1.0 / self.split_dist

    def travel(self, tm: TravelModel) -> np.ndarray:
        return self.dist / tm.speed

    def occupancy_vector(self, occ: Mapping[int, int]) -> np.ndarray:
        vec = np.zeros(len(self.depots), dtype=int)
        for d, n in occ.items():
            vec[self.index[d]] = n
        return vec


@lru_cache(maxsize=32)
def _geometry(grid: Grid, depots: tuple[Depot, ...]) -> DepotGeometry:
    return DepotGeometry(grid, depots)


def geometry_for(grid: Grid, depots: Sequence[Depot]) -> DepotGeometry:
    return _geometry(grid, tuple(sorted(depots, key=lambda d: d.id)))


@dataclass
class SplitRates:
    """Per-(depot, cell) arrival rates; rows follow ``depot_ids``."""

    share: np.ndarray
    depot_ids: list[int]
    roi: float

    def of(self, depot_id: int, cell: int) -> float:
        return float(self.share[self.depot_ids.index(depot_id), cell])


def _split_matrix(geo: DepotGeometry, occ_vec: np.ndarray, rates: np.ndarray, roi: float) -> np.ndarray:
    occupied = occ_vec >= 1
    weights = np.where(occupied[:, None] & (geo.dist <= roi), geo.inv_dist, 0.0)
    total = weights.sum(axis=0)
    covered = total > 0
    share = weights * (rates / np.where(covered, total, 1.0))
    if not covered.all():
        cells = np.flatnonzero(~covered)
        masked = np.where(occupied[:, None], geo.dist[:, cells], np.inf)
        nearest = np.argmin(masked, axis=0)
        share[nearest, cells] = rates[cells]
    return share


def split_rates(
    rates: RateMap,
    occupancy: Mapping[int, int],
    depots: Sequence[Depot],
    grid: Grid,
    roi: float,
) -> SplitRates:
    """Split each cell's rate over occupied depots within ``roi`` miles, inversely to distance.

    Cells with no occupied depot in range go wholly to the nearest occupied depot.
    """
    if not roi > 0:
        raise ValueError(f"roi must be positive, got {roi}")
    geo = geometry_for(grid, depots)
    occ_vec = geo.occupancy_vector(occupancy)
    if not (occ_vec >= 1).any():
        raise ValueError("split_rates needs at least one occupied depot")
    return SplitRates(_split_matrix(geo, occ_vec, rates.rate_per_cell, roi), list(geo.ids), roi)


def _score(geo: DepotGeometry, occ_vec: np.ndarray, rates: np.ndarray, mu: float, travel: np.ndarray, roi: float) -> float:
    share = _split_matrix(geo, occ_vec, rates, roi)
    total = 0.0
    for c in np.unique(occ_vec[occ_vec >= 1]):
        rows = occ_vec == c
        s = share[rows]
        mask = s > 0
        if not mask.any():
            continue
        s = s[mask]
        q = s / (c * mu)
        if (q >= 1).any():
            return math.inf
        omega = _wait_factor_array(int(c), q)
        total += float(np.sum(omega / (c * mu - s)) + mask.sum() / mu + np.sum(travel[rows][mask]))
    return total


def allocation_score(
    occupancy: Mapping[int, int],
    rates: RateMap,
    sm: ServiceModel,
    depots: Sequence[Depot],
    grid: Grid,
    tm: TravelModel,
    roi: float,
) -> float:
    """Sum of queue response time plus travel time over every served (depot, cell) pair.

    Lower is better; an unstable stream makes the whole allocation ``inf``.
    """
    geo = geometry_for(grid, depots)
    occ_vec = geo.occupancy_vector(occupancy)
    if not (occ_vec >= 1).any():
        raise ValueError("allocation_score needs at least one placed agent")
    return _score(geo, occ_vec, rates.rate_per_cell, sm.mu, geo.travel(tm), roi)


def greedy_trace(
    n_agents: int,
    depots: Sequence[Depot],
    rates: RateMap,
    sm: ServiceModel,
    grid: Grid,
    tm: TravelModel,
    roi: float,
    *,
    capacity: Mapping[int, int] | None = None,
    initial: Mapping[int, int] | None = None,
) -> list[int]:
    """Depot ids in the order the iterative greedy search commits them.

    ``capacity`` overrides depot capacities (e.g. slots left after in-transit
    reservations); ``initial`` holds agents already fixed in place, which count
    toward both score and capacity but are not part of the returned trace.
    """
    if n_agents < 0:
        raise ValueError("n_agents must be >= 0")
    geo = geometry_for(grid, depots)
    cap = geo.capacity.copy() if capacity is None else np.array([capacity.get(d, 0) for d in geo.ids], dtype=int)
    occ = np.zeros(len(geo.ids), dtype=int) if initial is None else geo.occupancy_vector(initial)
    if int(np.maximum(cap - occ, 0).sum()) < n_agents:
        raise ValueError(f"total depot capacity cannot hold {n_agents} agents")
    travel = geo.travel(tm)
    rate_vec = rates.rate_per_cell
    trace = []
    for _ in range(n_agents):
        best, best_score = -1, math.inf
        for i in range(len(geo.ids)):
            if occ[i] >= cap[i]:
                continue
            occ[i] += 1
            score = _score(geo, occ, rate_vec, sm.mu, travel, roi)
            occ[i] -= 1
            # scores within rounding noise count as ties, which the lower id wins
            if best < 0 or score < best_score - TIE_TOLERANCE * abs(best_score):
                best, best_score = i, score
        occ[best] += 1
        trace.append(geo.ids[best])
    return trace


def greedy_place(
    n_agents: int,
    depots: Sequence[Depot],
    rates: RateMap,
    sm: ServiceModel,
    grid: Grid,
    tm: TravelModel,
    roi: float,
    *,
    capacity: Mapping[int, int] | None = None,
    initial: Mapping[int, int] | None = None,
) -> Occupancy:
    """Occupancy chosen by the greedy search for ``n_agents`` new agents."""
    occ: Occupancy = {d.id: 0 for d in depots}
    for d in greedy_trace(n_agents, depots, rates, sm, grid, tm, roi, capacity=capacity, initial=initial):
        occ[d] += 1
    return occ


def residual_target(
    n_free: int,
    held: Mapping[int, int],
    depots: Sequence[Depot],
    rates: RateMap,
    sm: ServiceModel,
    grid: Grid,
    tm: TravelModel,
    roi: float,
    *,
    fleet_trace: Sequence[int] | None = None,
) -> Occupancy:
    """Depots for ``n_free`` movable agents when ``held`` slots are pinned by agents that cannot move.

    The whole fleet (``n_free`` plus the pinned agents) is placed by the greedy
    search; pinned agents cover their own depots' slots and the movable agents
    take the remaining slots in the order the search committed them. If pinned
    agents sit off the fleet placement, the search is continued from the
    combined occupancy to place whoever is left.
    """
    n_fleet = n_free + sum(held.values())
    if fleet_trace is None:
        fleet_trace = greedy_trace(n_fleet, depots, rates, sm, grid, tm, roi)
    pinned = dict(held)
    occ: Occupancy = {d.id: 0 for d in depots}
    placed = 0
    for d in fleet_trace[:n_fleet]:
        if pinned.get(d, 0) > 0:
            pinned[d] -= 1
        elif placed < n_free:
            occ[d] += 1
            placed += 1
    if placed < n_free:
        fixed = {d.id: occ[d.id] + held.get(d.id, 0) for d in depots}
        for d in greedy_trace(n_free - placed, depots, rates, sm, grid, tm, roi, initial=fixed):
            occ[d] += 1
    return occ


def assign_agents(
    target: Mapping[int, int],
    agent_positions: Mapping[int, int],
    depots: Sequence[Depot],
    grid: Grid,
) -> dict[int, int]:
    """Match agents to the target depot slots minimizing total travel distance."""
    slots = [d for d in sorted(target) for _ in range(target[d])]
    agents = sorted(agent_positions)
    if len(slots) != len(agents):
        raise ValueError(f"{len(agents)} agents for {len(slots)} depot slots")
    if not agents:
        return {}
    cell_of = {d.id: d.cell for d in depots}
    cost = distance_matrix([agent_positions[a] for a in agents], [cell_of[d] for d in slots], grid)
    rows, cols = linear_sum_assignment(cost)
    return {agents[r]: slots[c] for r, c in zip(rows, cols)}
