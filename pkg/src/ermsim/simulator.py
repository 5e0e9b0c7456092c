"""Discrete-event engine for greedy dispatch with periodic rebalancing.

The world moves through four kinds of events: incident arrivals, responder
arrivals (at an incident or at a depot), service completions and periodic
rebalance steps. Dispatch is always greedy: the closest available responder
goes, otherwise the incident waits in a FIFO queue.
"""

from __future__ import annotations

import csv
import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .incidents import TIE_EPSILON, IncidentChain, IncidentEvent
from .queueing import Occupancy, ServiceModel
from .spatial import Depot, Grid, TravelModel, distance, travel_time

RESPONSE_HEADER = ["incident_id", "t_aware", "t_dispatch", "t_arrive", "response_min", "responder_id"]
REBALANCE_HEADER = ["step_time", "agent_id", "miles_moved"]


class SimulationError(RuntimeError):
    """A transition was requested that the current state does not allow."""


class Status(Enum):
    AVAILABLE_AT_DEPOT = "available"
    EN_ROUTE_TO_INCIDENT = "en_route"
    SERVICING = "servicing"
    REBALANCING = "rebalancing"


@dataclass
class ResponderState:
    id: int
    position: int
    destination: int
    status: Status = Status.AVAILABLE_AT_DEPOT
    busy_until: Optional[float] = None
    # depot the responder is parked at or heading to; None at an ad-hoc station
    station: Optional[int] = None
    incident: Optional[IncidentEvent] = None

    @property
    def available(self) -> bool:
        return self.status is Status.AVAILABLE_AT_DEPOT


@dataclass
class WorldState:
    time: float
    responders: list[ResponderState]
    pending: deque = field(default_factory=deque)
    occupancy: Occupancy = field(default_factory=dict)

    def available(self) -> list[ResponderState]:
        return [r for r in self.responders if r.available]


@dataclass(frozen=True)
class ResponseRecord:
    incident_id: int
    t_aware: float
    t_dispatch: float
    t_arrive: float
    responder: int

    @property
    def response_min(self) -> float:
        return self.t_arrive - self.t_aware


class EventKind(Enum):
    INCIDENT = "incident"
    SERVICE_DONE = "service_done"
    REBALANCE = "rebalance"
    ARRIVAL = "arrival"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    payload: object = None


class EventQueue:
    """Time-ordered events; a time already in use is pushed later by ``TIE_EPSILON``."""

    def __init__(self):
        self._heap: list = []
        self._times: set[float] = set()
        self._seq = itertools.count()

    def push(self, time: float, kind: EventKind, payload=None) -> SimEvent:
        while time in self._times:
            time += TIE_EPSILON
        self._times.add(time)
        ev = SimEvent(time, kind, payload)
        heapq.heappush(self._heap, (time, next(self._seq), ev))
        return ev

    def pop(self) -> SimEvent:
        time, _, ev = heapq.heappop(self._heap)
        self._times.discard(time)
        return ev

    def __len__(self):
        return len(self._heap)


@dataclass
class SimContext:
    grid: Grid
    tm: TravelModel
    sm: ServiceModel
    depots: tuple[Depot, ...]
    exponential_service: bool = False
    post_service: str = "return"  # "return" to the home depot or "idle" at the scene
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.post_service not in ("return", "idle"):
            raise ValueError(f"post_service must be 'return' or 'idle', got {self.post_service!r}")
        self.depots = tuple(sorted(self.depots, key=lambda d: d.id))
        self.depot_by_id = {d.id: d for d in self.depots}

    def service_duration(self) -> float:
        if self.exponential_service:
            return float(self.rng.exponential(self.sm.mean_minutes))
        return self.sm.mean_minutes


def initial_state(depots: Sequence[Depot], placement: Mapping[int, int], time: float = 0.0) -> WorldState:
    """World with agent ``a`` parked at depot ``placement[a]``; agent ids must be 0..n-1."""
    by_id = {d.id: d for d in depots}
    if sorted(placement) != list(range(len(placement))):
        raise ValueError("agent ids must be 0..n-1")
    occ: Occupancy = {d.id: 0 for d in depots}
    responders = []
    for a in sorted(placement):
        d = by_id[placement[a]]
        occ[d.id] += 1
        if occ[d.id] > d.capacity:
            raise ValueError(f"depot {d.id} over capacity in initial placement")
        responders.append(ResponderState(a, d.cell, d.cell, station=d.id))
    return WorldState(time, responders, deque(), occ)


def spread_placement(depots: Sequence[Depot], n_agents: int) -> dict[int, int]:
    """Deterministic initial placement filling depots at evenly spaced positions in id order."""
    slots = [d.id for d in sorted(depots, key=lambda d: d.id) for _ in range(d.capacity)]
    if n_agents > len(slots):
        raise ValueError(f"{n_agents} agents exceed total depot capacity {len(slots)}")
    return {a: slots[a * len(slots) // n_agents] for a in range(n_agents)}


def free_capacity(state: WorldState, depots: Sequence[Depot]) -> dict[int, int]:
    """Slots per depot open to currently available agents (excludes in-transit reservations)."""
    cap = {d.id: d.capacity for d in depots}
    for r in state.responders:
        if not r.available and r.station is not None:
            cap[r.station] -= 1
    return cap


def _send(state: WorldState, r: ResponderState, incident: IncidentEvent, ctx: SimContext) -> ResponseRecord:
    if r.available and r.station is not None:
        state.occupancy[r.station] -= 1
    arrive = state.time + travel_time(r.position, incident.cell, ctx.grid, ctx.tm)
    r.status = Status.EN_ROUTE_TO_INCIDENT
    r.destination = incident.cell
    r.busy_until = arrive
    if ctx.post_service == "idle":
        r.station = None
    r.incident = incident
    return ResponseRecord(incident.id, incident.time, state.time, arrive, r.id)


def dispatch_nearest(state: WorldState, incident: IncidentEvent, ctx: SimContext) -> Optional[ResponseRecord]:
    """Send the closest available responder, or queue the incident and return None."""
    best = None
    best_tt = 0.0
    for r in state.responders:
        if not r.available:
            continue
        tt = travel_time(r.position, incident.cell, ctx.grid, ctx.tm)
        if best is None or tt < best_tt:
            best, best_tt = r, tt
    if best is None:
        state.pending.append(incident)
        return None
    return _send(state, best, incident, ctx)


def arrive_at_scene(state: WorldState, agent: int, ctx: SimContext) -> float:
    """Responder reaches its incident and starts service; returns the service end time."""
    r = state.responders[agent]
    if r.status is not Status.EN_ROUTE_TO_INCIDENT:
        raise SimulationError(f"agent {agent} is not en route to an incident")
    r.position = r.destination
    r.status = Status.SERVICING
    r.busy_until = state.time + ctx.service_duration()
    return r.busy_until


def complete_service(state: WorldState, agent: int, ctx: SimContext) -> Optional[ResponseRecord]:
    """Finish service and take the oldest waiting incident if there is one.

    Otherwise the responder either drives back to its home depot (``return``)
    or waits at the scene as an ad-hoc station (``idle``).
    """
    r = state.responders[agent]
    if r.status is not Status.SERVICING:
        raise SimulationError(f"agent {agent} is not servicing")
    r.position = r.destination
    r.incident = None
    if state.pending:
        return _send(state, r, state.pending.popleft(), ctx)
    home = ctx.depot_by_id[r.station] if r.station is not None else None
    if home is None or home.cell == r.position:
        r.status = Status.AVAILABLE_AT_DEPOT
        r.busy_until = None
        if home is not None:
            state.occupancy[home.id] += 1
        return None
    r.status = Status.REBALANCING
    r.destination = home.cell
    r.busy_until = state.time + travel_time(r.position, home.cell, ctx.grid, ctx.tm)
    return None


def finish_rebalance(state: WorldState, agent: int, ctx: SimContext) -> Optional[ResponseRecord]:
    """Responder reaches its new depot; it picks up the queue head if one is waiting."""
    r = state.responders[agent]
    if r.status is not Status.REBALANCING:
        raise SimulationError(f"agent {agent} is not rebalancing")
    r.position = r.destination
    r.status = Status.AVAILABLE_AT_DEPOT
    r.busy_until = None
    state.occupancy[r.station] += 1
    if state.pending:
        return _send(state, r, state.pending.popleft(), ctx)
    return None


def apply_rebalance(state: WorldState, assignment: Mapping[int, int], ctx: SimContext) -> dict[int, float]:
    """Move every available responder to its assigned depot; returns miles moved per agent."""
    available = {r.id for r in state.responders if r.available}
    if set(assignment) != available:
        raise SimulationError(
            f"assignment covers {sorted(assignment)} but available agents are {sorted(available)}"
        )
    load = free_capacity(state, ctx.depots)
    for d in assignment.values():
        if d not in load:
            raise SimulationError(f"unknown depot {d}")
        load[d] -= 1
        if load[d] < 0:
            raise SimulationError(f"depot {d} over capacity")
    moved = {}
    for a in sorted(assignment):
        r = state.responders[a]
        depot = ctx.depot_by_id[assignment[a]]
        miles = distance(r.position, depot.cell, ctx.grid)
        moved[a] = miles
        if r.station is not None:
            state.occupancy[r.station] -= 1
        r.station = depot.id
        r.destination = depot.cell
        if miles == 0:
            state.occupancy[depot.id] += 1
            continue
        r.status = Status.REBALANCING
        r.busy_until = state.time + miles / ctx.tm.speed
    return moved


class RebalancePolicy(Protocol):
    """Called at each rebalance step; returns a depot for every available agent, or None to skip."""

    def __call__(self, state: WorldState, ctx: SimContext, step: int) -> Optional[Mapping[int, int]]: ...


def no_rebalance(state: WorldState, ctx: SimContext, step: int) -> None:
    return None


@dataclass
class RebalanceMove:
    step_time: float
    agent_id: int
    miles_moved: float


@dataclass
class SimResult:
    records: list[ResponseRecord]
    moves: list[RebalanceMove]
    n_rebalance_steps: int = 0

    def step_mean_miles(self) -> list[float]:
        """Mean miles moved per rebalanced agent, one entry per step that moved anyone."""
        by_step: dict[float, list[float]] = {}
        for m in self.moves:
            by_step.setdefault(m.step_time, []).append(m.miles_moved)
        return [float(np.mean(v)) for _, v in sorted(by_step.items())]

    def response_times(self) -> np.ndarray:
        return np.array([r.response_min for r in self.records])

    def write_responses(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESPONSE_HEADER)
            for r in self.records:
                w.writerow([r.incident_id, repr(r.t_aware), repr(r.t_dispatch), repr(r.t_arrive),
                            repr(r.response_min), r.responder])

    def write_moves(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REBALANCE_HEADER)
            for m in self.moves:
                w.writerow([repr(m.step_time), m.agent_id, repr(m.miles_moved)])


def check_invariants(state: WorldState, ctx: SimContext, n_agents: int) -> None:
    if len(state.responders) != n_agents:
        raise SimulationError("responder count changed")
    parked = {d.id: 0 for d in ctx.depots}
    for r in state.responders:
        if r.available:
            if r.busy_until is not None or r.destination != r.position:
                raise SimulationError(f"available agent {r.id} has inconsistent fields")
            if r.station is not None:
                parked[r.station] += 1
        elif r.busy_until is None:
            raise SimulationError(f"busy agent {r.id} has no busy_until")
    if parked != {d: state.occupancy.get(d, 0) for d in parked}:
        raise SimulationError(f"occupancy {state.occupancy} disagrees with parked agents {parked}")
    for d in ctx.depots:
        if parked[d.id] > d.capacity:
            raise SimulationError(f"depot {d.id} holds {parked[d.id]} > capacity {d.capacity}")
    if state.pending and any(r.available for r in state.responders):
        raise SimulationError("incidents waiting while an agent is available")


def run(
    initial: WorldState,
    policy: RebalancePolicy,
    incidents: IncidentChain,
    rebalance_period: float,
    ctx: SimContext,
    *,
    validate: bool = False,
    on_event: Callable[[SimEvent, WorldState], None] | None = None,
) -> SimResult:
    """Simulate ``incidents`` until every one has been reached.

    Rebalance steps fall at ``start + k * rebalance_period`` (k >= 1) up to the
    chain's end. ``validate`` checks state invariants after every event.
    """
    if not rebalance_period > 0:
        raise ValueError("rebalance_period must be positive")
    state = initial
    state.time = max(state.time, incidents.start)
    n_agents = len(state.responders)
    queue = EventQueue()
    k = 1
    while incidents.start + k * rebalance_period <= incidents.end + 1e-9:
        queue.push(incidents.start + k * rebalance_period, EventKind.REBALANCE, k)
        k += 1
    for inc in incidents.events:
        queue.push(inc.time, EventKind.INCIDENT, inc)

    records: list[ResponseRecord] = []
    moves: list[RebalanceMove] = []
    steps = 0

    def dispatched(rec: Optional[ResponseRecord]) -> None:
        if rec is not None:
            records.append(rec)
            queue.push(rec.t_arrive, EventKind.ARRIVAL, rec.responder)

    while queue:
        ev = queue.pop()
        if ev.time < state.time - 1e-9:
            raise SimulationError("event time went backwards")
        state.time = ev.time
        if ev.kind is EventKind.INCIDENT:
            dispatched(dispatch_nearest(state, ev.payload, ctx))
        elif ev.kind is EventKind.ARRIVAL:
            r = state.responders[ev.payload]
            if r.status is Status.EN_ROUTE_TO_INCIDENT:
                queue.push(arrive_at_scene(state, r.id, ctx), EventKind.SERVICE_DONE, r.id)
            else:
                dispatched(finish_rebalance(state, r.id, ctx))
        elif ev.kind is EventKind.SERVICE_DONE:
            r = state.responders[ev.payload]
            dispatched(complete_service(state, r.id, ctx))
            if r.status is Status.REBALANCING:
                queue.push(r.busy_until, EventKind.ARRIVAL, r.id)
        elif ev.kind is EventKind.REBALANCE:
            steps += 1
            if state.available():
                assignment = policy(state, ctx, ev.payload)
                if assignment is not None:
                    for a, miles in apply_rebalance(state, assignment, ctx).items():
                        moves.append(RebalanceMove(state.time, a, miles))
                        r = state.responders[a]
                        if r.status is Status.REBALANCING:
                            queue.push(r.busy_until, EventKind.ARRIVAL, a)
        if validate:
            check_invariants(state, ctx, n_agents)
        if on_event is not None:
            on_event(ev, state)
    records.sort(key=lambda rec: (rec.t_aware, rec.incident_id))
    return SimResult(records, moves, steps)
