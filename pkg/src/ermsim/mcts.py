"""Decentralized multi-agent Monte-Carlo tree search for responder rebalancing.

Every available agent grows its own UCB1 tree over a shared sampled future:
tree levels alternate between rebalance steps, where only the planning agent
branches (one child per depot) and everyone else follows a cheap behaviour
model, and incident arrivals, which are resolved by greedy dispatch. A
central filter then turns the per-agent rankings into one joint assignment
that respects depot capacity.
"""

from __future__ import annotations

import math
import random
import time as _time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .incidents import IncidentChain, IncidentEvent, RateMap, oracle_chain, sample_chain
from .queueing import ServiceModel, assign_agents, greedy_trace, residual_target
from .spatial import Depot, Grid, TravelModel

REBALANCE = 0
INCIDENT = 1


class OtherAgentPolicy(str, Enum):
    STATIC = "static"
    QUEUE = "queue"


@dataclass
class PlannerConfig:
    iteration_limit: int = 250
    lookahead_horizon: float = 120.0  # minutes
    psi: float = 10.0
    alpha: float = 0.99995  # discount per second of planning time
    rebalance_period: float = 60.0  # minutes
    n_chains: int = 5
    ucb_c: float = math.sqrt(2)
    other_agent_policy: OtherAgentPolicy = OtherAgentPolicy.STATIC
    roi: float = 3.0  # used by the queue other-agent model
    time_limit: Optional[float] = None  # optional wall-clock cap per tree, seconds

    def __post_init__(self):
        self.other_agent_policy = OtherAgentPolicy(self.other_agent_policy)
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.psi < 0:
            raise ValueError(f"psi must be >= 0, got {self.psi}")
        if self.iteration_limit < 1:
            raise ValueError("iteration_limit must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not self.lookahead_horizon > 0 or not self.rebalance_period > 0:
            raise ValueError("lookahead_horizon and rebalance_period must be positive")

    def discount(self, t_h: float) -> float:
        """Discount weight for an event ``t_h`` minutes into the horizon."""
        return self.alpha ** (t_h * 60.0)


def reward_step(
    prev: float,
    t_h: float,
    cfg: PlannerConfig,
    n_agents: int,
    *,
    response: float | None = None,
    moved: Sequence[float] | None = None,
) -> float:
    """Running reward after one response (minutes) or one balancing step (miles per agent)."""
    if t_h < 0:
        raise ValueError("t_h must be >= 0")
    if (response is None) == (moved is None):
        raise ValueError("pass exactly one of response= or moved=")
    w = cfg.discount(t_h)
    if response is not None:
        return prev - w * response
    return prev - w * cfg.psi * sum(moved) / n_agents


class PlanWorld:
    """Static facts the planner's forward model needs."""

    def __init__(self, grid: Grid, tm: TravelModel, sm: ServiceModel, depots: Sequence[Depot],
                 rates: RateMap | None = None, post_service: str = "return"):
        self.grid = grid
        self.tm = tm
        self.sm = sm
        self.depots = tuple(sorted(depots, key=lambda d: d.id))
        self.depot_cell = {d.id: d.cell for d in self.depots}
        self.depot_ids = [d.id for d in self.depots]
        self.rates = rates
        self.service = sm.mean_minutes
        self.returns = post_service == "return"
        self.cs = grid.cell_size
        self.xy = [(c % grid.width, c // grid.width) for c in range(grid.n_cells)]  # integer cell coordinates
        self._queue_cache: dict = {}
        self._fleet_trace: list[int] | None = None

    def miles(self, a: int, b: int) -> float:
        ax, ay = self.xy[a]
        bx, by = self.xy[b]
        return math.hypot(ax - bx, ay - by) * self.cs


class PlanState:
    """Compact forward-model state.

    Per agent: the cell it occupies once free (``pos``), the time it becomes
    free (``free_at``), its home depot (-1 for none) and, while it is on a job
    it will drive home from, the end of that job and the job's cell. An agent
    is available at ``t`` iff ``free_at <= t``.

    Queued incidents are taken by whichever responder frees up first, so a
    queued incident can be bound at once to the earliest-free responder: a
    busy one picks it up at the scene when its job ends, a returning or
    rebalancing one when it reaches its depot. This reproduces the
    event-driven simulator without an event queue.
    """

    __slots__ = ("pos", "free_at", "home", "job_end", "job_cell")

    def __init__(self, pos: list[int], free_at: list[float], home: list[int],
                 job_end: list[float] | None = None, job_cell: list[int] | None = None):
        self.pos = pos
        self.free_at = free_at
        self.home = home
        self.job_end = job_end if job_end is not None else [-math.inf] * len(pos)
        self.job_cell = job_cell if job_cell is not None else [-1] * len(pos)

    def copy(self) -> "PlanState":
        return PlanState(self.pos[:], self.free_at[:], self.home[:], self.job_end[:], self.job_cell[:])

    def available(self, t: float) -> list[int]:
        return [j for j, f in enumerate(self.free_at) if f <= t]

    def dispatch(self, t: float, cell: int, world: PlanWorld) -> tuple[float, float]:
        """Greedy dispatch at time ``t``; returns (dispatch time, response minutes)."""
        xy = world.xy
        gx, gy = xy[cell]
        best = -1
        best_d = math.inf
        for j, f in enumerate(self.free_at):
            if f <= t:
                px, py = xy[self.pos[j]]
                d = math.hypot(px - gx, py - gy)
                if d < best_d:
                    best, best_d = j, d
        if best >= 0:
            start = t
        else:
            start = math.inf
            origin = -1
            for j, f in enumerate(self.free_at):
                e = self.job_end[j]
                when, where = (e, self.job_cell[j]) if e > t else (f, self.pos[j])
                if when < start:
                    best, start, origin = j, when, where
            px, py = xy[origin]
            best_d = math.hypot(px - gx, py - gy)
        arrive = start + best_d * world.cs / world.tm.speed
        done = arrive + world.service
        h = self.home[best]
        if world.returns and h >= 0 and world.depot_cell[h] != cell:
            home_cell = world.depot_cell[h]
            self.job_end[best] = done
            self.job_cell[best] = cell
            self.pos[best] = home_cell
            self.free_at[best] = done + world.miles(cell, home_cell) / world.tm.speed
        else:
            self.job_end[best] = -math.inf
            self.pos[best] = cell
            self.free_at[best] = done
            if not world.returns:
                self.home[best] = -1
        return start, arrive - t

    def move(self, j: int, depot: int, t: float, world: PlanWorld) -> float:
        cell = world.depot_cell[depot]
        miles = world.miles(self.pos[j], cell)
        self.pos[j] = cell
        self.home[j] = depot
        self.job_end[j] = -math.inf
        if miles > 0:
            self.free_at[j] = t + miles / world.tm.speed
        return miles


def plan_state_from_world(state, world: PlanWorld) -> PlanState:
    """Project a simulator ``WorldState`` onto the planner's compact state."""
    from .simulator import Status

    n = len(state.responders)
    ps = PlanState([0] * n, [-math.inf] * n, [-1] * n)
    for j, r in enumerate(state.responders):
        ps.home[j] = -1 if r.station is None else r.station
        if r.status is Status.AVAILABLE_AT_DEPOT:
            ps.pos[j] = r.position
        elif r.status is Status.REBALANCING:
            ps.pos[j] = r.destination
            ps.free_at[j] = r.busy_until
        else:
            done = r.busy_until + (world.service if r.status is Status.EN_ROUTE_TO_INCIDENT else 0.0)
            h = ps.home[j]
            if world.returns and h >= 0 and world.depot_cell[h] != r.destination:
                home_cell = world.depot_cell[h]
                ps.job_end[j] = done
                ps.job_cell[j] = r.destination
                ps.pos[j] = home_cell
                ps.free_at[j] = done + world.miles(r.destination, home_cell) / world.tm.speed
            else:
                ps.pos[j] = r.destination
                ps.free_at[j] = done
    return ps


@dataclass
class Scenario:
    """One sampled future: time-sorted (time, kind, cell) events over the horizon."""

    start: float
    end: float
    events: list[tuple[float, int, int]]


def build_scenario(chain: IncidentChain, t0: float, cfg: PlannerConfig) -> Scenario:
    end = t0 + cfg.lookahead_horizon
    events = []
    k = 0
    while t0 + k * cfg.rebalance_period < end:
        events.append((t0 + k * cfg.rebalance_period, REBALANCE, -1))
        k += 1
    events.extend((ev.time, INCIDENT, ev.cell) for ev in chain.events if t0 <= ev.time < end)
    events.sort(key=lambda e: (e[0], e[1]))
    return Scenario(t0, end, events)


class TreeNode:
    __slots__ = ("state", "action", "reward", "visits", "total_value", "rollouts",
                 "children", "untried", "index", "parent")

    def __init__(self, state: PlanState, index: int, reward: float, action=None, parent=None):
        self.state = state
        self.index = index  # next scenario event this node branches on
        self.reward = reward
        self.action = action
        self.parent = parent
        self.visits = 0
        self.total_value = 0.0
        self.rollouts = 0
        self.children: dict = {}
        self.untried: list = []

    @property
    def mean_value(self) -> float:
        return self.total_value / self.visits if self.visits else -math.inf


def _action_key(a):
    return -1 if a is None else a


def ucb1_select(node: TreeNode, ucb_c: float):
    """Child action maximizing mean + c * sqrt(ln N / n); ties go to the lowest action id."""
    if node.untried:
        raise ValueError("node still has untried actions; expand before selecting")
    if not node.children:
        raise ValueError("node has no children")
    log_n = math.log(node.visits) if node.visits > 0 else 0.0
    best, best_score = None, -math.inf
    for a in sorted(node.children, key=_action_key):
        child = node.children[a]
        if child.visits == 0:
            score = math.inf
        else:
            score = child.total_value / child.visits + ucb_c * math.sqrt(log_n / child.visits)
        if best is None or score > best_score:
            best, best_score = a, score
    return best


class AgentSearch:
    """Search tree for one planning agent over one scenario."""

    def __init__(self, world: PlanWorld, scenario: Scenario, agent: int, cfg: PlannerConfig,
                 root_state: PlanState, rng: random.Random):
        self.world = world
        self.scenario = scenario
        self.agent = agent
        self.cfg = cfg
        self.rng = rng
        self.n_agents = len(root_state.pos)
        self.root = self._make_node(root_state, 0, 0.0)

    # -- tree operations -------------------------------------------------

    def _make_node(self, state: PlanState, index: int, reward: float, action=None, parent=None) -> TreeNode:
        node = TreeNode(state, index, reward, action, parent)
        events = self.scenario.events
        if index < len(events):
            t, kind, _ = events[index]
            if kind == REBALANCE and state.free_at[self.agent] <= t:
                acts = list(self.world.depot_ids)
                self.rng.shuffle(acts)
                node.untried = acts
            else:
                node.untried = [None]
        return node

    def expand(self, node: TreeNode) -> TreeNode:
        """Apply the node's next event with one untried action and attach the child."""
        action = node.untried.pop()
        t, kind, cell = self.scenario.events[node.index]
        t_h = t - self.scenario.start
        state = node.state.copy()
        if kind == REBALANCE:
            moved = [0.0] * self.n_agents
            if action is not None:
                moved[self.agent] = state.move(self.agent, action, t, self.world)
            for j, d in self._other_moves(state, t, action).items():
                moved[j] = state.move(j, d, t, self.world)
            reward = reward_step(node.reward, t_h, self.cfg, self.n_agents, moved=moved)
        else:
            start, response = state.dispatch(t, cell, self.world)
            reward = node.reward
            if start < self.scenario.end:
                reward = reward_step(reward, t_h, self.cfg, self.n_agents, response=response)
        child = self._make_node(state, node.index + 1, reward, action, node)
        node.children[action] = child
        return child

    def _other_moves(self, state: PlanState, t: float, own: Optional[int]) -> dict[int, int]:
        if self.cfg.other_agent_policy is OtherAgentPolicy.STATIC:
            return {}
        others = [j for j in state.available(t) if j != self.agent]
        if not others:
            return {}
        world = self.world
        # agents that are away keep their home slot; the planning agent's pick is fixed too
        held = {d: 0 for d in world.depot_ids}
        for j, f in enumerate(state.free_at):
            if f > t and state.home[j] >= 0:
                held[state.home[j]] += 1
        if own is not None:
            held[own] += 1
        key = (len(others), tuple(sorted(held.items())))
        target = world._queue_cache.get(key)
        if target is None:
            if world._fleet_trace is None:
                world._fleet_trace = greedy_trace(self.n_agents, world.depots, world.rates, world.sm, world.grid,
                                                  world.tm, self.cfg.roi)
            try:
                target = residual_target(len(others), held, world.depots, world.rates, world.sm, world.grid,
                                         world.tm, self.cfg.roi, fleet_trace=world._fleet_trace)
            except ValueError:
                target = {}  # not enough room: the others stay put
            world._queue_cache[key] = target
        if not target:
            return {}
        return assign_agents(target, {j: state.pos[j] for j in others}, world.depots, world.grid)

    def rollout(self, node: TreeNode) -> float:
        """Greedy dispatch with no further rebalancing to the end of the horizon."""
        events = self.scenario.events
        if node.index >= len(events):
            return node.reward
        state = node.state.copy()
        reward = node.reward
        end = self.scenario.end
        t0 = self.scenario.start
        disc = self.cfg.discount
        for t, kind, cell in events[node.index:]:
            if kind != INCIDENT:
                continue
            start, response = state.dispatch(t, cell, self.world)
            if start < end:
                reward -= disc(t - t0) * response
        return reward

    def iterate(self) -> None:
        node = self.root
        path = [node]
        n_events = len(self.scenario.events)
        while True:
            if node.index >= n_events:
                value = node.reward
                node.rollouts += 1
                break
            if node.untried:
                node = self.expand(node)
                path.append(node)
                value = self.rollout(node)
                node.rollouts += 1
                break
            node = node.children[ucb1_select(node, self.cfg.ucb_c)]
            path.append(node)
        for n in path:
            n.visits += 1
            n.total_value += value

    def search(self) -> TreeNode:
        deadline = None if self.cfg.time_limit is None else _time.monotonic() + self.cfg.time_limit
        for _ in range(self.cfg.iteration_limit):
            self.iterate()
            if deadline is not None and _time.monotonic() > deadline:
                break
        return self.root

    def ranked(self) -> list[tuple[int, float]]:
        return rank_root(self.root, self.world.depot_ids)


def rank_root(root: TreeNode, depot_ids: Sequence[int]) -> list[tuple[int, float]]:
    """Every depot with its mean backed-up value, best first; unexplored ones last."""
    values = {d: -math.inf for d in depot_ids}
    for a, child in root.children.items():
        if a is not None:
            values[a] = child.mean_value
    return sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))


def mmcts(
    world: PlanWorld,
    state: PlanState,
    agent: int,
    scenarios: Sequence[Scenario],
    cfg: PlannerConfig,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Rank depot actions for ``agent`` by value averaged over one search per scenario."""
    totals = {d: 0.0 for d in world.depot_ids}
    counts = {d: 0 for d in world.depot_ids}
    for i, scen in enumerate(scenarios):
        search = AgentSearch(world, scen, agent, cfg, state, random.Random(f"{seed}:{agent}:{i}"))
        search.search()
        for d, v in search.ranked():
            if v > -math.inf:
                totals[d] += v
                counts[d] += 1
    values = {d: (totals[d] / counts[d] if counts[d] else -math.inf) for d in world.depot_ids}
    return sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))


def action_filter(
    ranked: Mapping[int, Sequence[tuple[int, float]]],
    capacity: Mapping[int, int],
    trace: list | None = None,
) -> dict[int, int]:
    """Greedily commit the single best valid (agent, depot) pair until every agent is placed.

    ``capacity`` holds the free slots per depot. Depots missing from an agent's
    ranking are used, lowest id first, only once its ranked ones are full.
    Commits are appended to ``trace`` as (agent, depot, value) when given.
    """
    remaining = {d: c for d, c in capacity.items() if c > 0}
    if sum(remaining.values()) < len(ranked):
        raise ValueError(f"{len(ranked)} agents but only {sum(remaining.values())} free depot slots")
    unassigned = sorted(ranked)
    out: dict[int, int] = {}
    while unassigned:
        best = None
        for a in unassigned:
            choice = next(((d, v) for d, v in ranked[a] if remaining.get(d, 0) > 0), None)
            if choice is None:
                choice = (min(remaining), -math.inf)
            if best is None or choice[1] > best[2]:
                best = (a, choice[0], choice[1])
        a, d, v = best
        if trace is not None:
            trace.append(best)
        out[a] = d
        remaining[d] -= 1
        if remaining[d] == 0:
            del remaining[d]
        unassigned.remove(a)
    return out


@dataclass
class Planner:
    """Rebalance planner: sample futures, search per agent, filter into one assignment."""

    world: PlanWorld
    cfg: PlannerConfig
    ground_truth: Optional[Sequence[IncidentEvent]] = None  # oracle mode when set
    last_rankings: dict = field(default_factory=dict, repr=False)

    def scenarios(self, t0: float, seed: int) -> list[Scenario]:
        if self.ground_truth is not None:
            chain = oracle_chain(self.ground_truth, t0, self.cfg.lookahead_horizon)
            return [build_scenario(chain, t0, self.cfg)]
        if self.world.rates is None:
            raise ValueError("sampled planning needs a rate map")
        seeds = np.random.SeedSequence([seed, int(round(t0 * 1000))]).spawn(self.cfg.n_chains)
        return [build_scenario(sample_chain(self.world.rates, t0, self.cfg.lookahead_horizon, s), t0, self.cfg)
                for s in seeds]

    def plan(self, state, capacity: Mapping[int, int], seed: int = 0) -> dict[int, int]:
        """Joint depot assignment for the available agents of simulator ``state``."""
        available = [r.id for r in state.responders if r.available]
        self.last_rankings = {}
        if not available:
            return {}
        scenarios = self.scenarios(state.time, seed)
        pstate = plan_state_from_world(state, self.world)
        for a in available:
            self.last_rankings[a] = mmcts(self.world, pstate, a, scenarios, self.cfg, seed)
        return action_filter(self.last_rankings, capacity)
