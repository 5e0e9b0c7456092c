"""Rebalance policies pluggable into ``simulator.run``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .incidents import IncidentEvent, RateMap
from .mcts import Planner, PlannerConfig, PlanWorld
from .queueing import assign_agents, greedy_trace, residual_target
from .simulator import SimContext, WorldState, free_capacity


@dataclass
class QueuePolicy:
    """Greedy queue-score placement of the fleet, then min-distance matching of the available agents.

    Agents that are busy keep the depot slot they will return to; the
    available ones fill the rest of the fleet placement.
    """

    rates: RateMap
    roi: float
    _trace: Optional[list[int]] = field(default=None, init=False, repr=False)

    def __call__(self, state: WorldState, ctx: SimContext, step: int) -> dict[int, int]:
        avail = state.available()
        cap = free_capacity(state, ctx.depots)
        held = {d.id: d.capacity - cap[d.id] for d in ctx.depots}
        if self._trace is None:
            self._trace = greedy_trace(len(state.responders), ctx.depots, self.rates, ctx.sm, ctx.grid, ctx.tm,
                                       self.roi)
        target = residual_target(len(avail), held, ctx.depots, self.rates, ctx.sm, ctx.grid, ctx.tm, self.roi,
                                 fleet_trace=self._trace)
        return assign_agents(target, {r.id: r.position for r in avail}, ctx.depots, ctx.grid)


class MMCTSPolicy:
    """Decentralized tree-search rebalancing; ``ground_truth`` switches to oracle futures."""

    def __init__(self, rates: Optional[RateMap], cfg: PlannerConfig, seed: int = 0,
                 ground_truth: Optional[Sequence[IncidentEvent]] = None):
        self.rates = rates
        self.cfg = cfg
        self.seed = seed
        self.ground_truth = ground_truth
        self._planner: Optional[Planner] = None

    def planner(self, ctx: SimContext) -> Planner:
        if self._planner is None:
            world = PlanWorld(ctx.grid, ctx.tm, ctx.sm, ctx.depots, self.rates, ctx.post_service)
            self._planner = Planner(world, self.cfg, self.ground_truth)
        return self._planner

    def __call__(self, state: WorldState, ctx: SimContext, step: int) -> dict[int, int]:
        cap = free_capacity(state, ctx.depots)
        step_seed = int(np.random.SeedSequence([self.seed, step]).generate_state(1)[0])
        return self.planner(ctx).plan(state, cap, seed=step_seed)
