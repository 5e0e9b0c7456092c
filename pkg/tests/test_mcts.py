import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ermsim.incidents import IncidentChain, IncidentEvent, RateMap, sample_chain
from ermsim.mcts import (INCIDENT, REBALANCE, AgentSearch, Planner, PlannerConfig, PlanState,
                         PlanWorld, Scenario, TreeNode, action_filter, build_scenario, mmcts, plan_state_from_world,
                         reward_step, ucb1_select)
from ermsim.queueing import ServiceModel, greedy_place, greedy_trace
from ermsim.simulator import SimContext, Status, dispatch_nearest, initial_state, no_rebalance, run
from ermsim.spatial import Depot, Grid, TravelModel


def walk(node):
    yield node
    for child in node.children.values():
        yield from walk(child)


def toy_world(seed=0, n_depots=5, width=6, mode="return"):
    rng = np.random.default_rng(seed)
    g = Grid(width, width)
    cells = rng.choice(g.n_cells, size=n_depots, replace=False)
    depots = tuple(Depot(i, int(c)) for i, c in enumerate(cells))
    rates = RateMap(rng.uniform(0, 0.02, g.n_cells), 0.0)
    world = PlanWorld(g, TravelModel(0.5), ServiceModel.from_mean_minutes(15.0), depots, rates, mode)
    return world, rates


def sim_state(world, placement, t=0.0):
    return initial_state(world.depots, placement, t)


# ---- reward -----------------------------------------------------------------------

def test_reward_examples():
    cfg = PlannerConfig(psi=10.0)
    assert reward_step(0.0, 0.0, cfg, 3, response=5.0) == -5.0
    assert reward_step(-100.0, 0.0, cfg, 2, moved=[4.0, 0.0]) == pytest.approx(-120.0)


def test_discount_is_per_second():
    cfg = PlannerConfig(alpha=0.99995)
    assert cfg.discount(60.0) == pytest.approx(0.99995**3600)
    assert cfg.discount(60.0) == pytest.approx(0.8353, abs=5e-5)
    assert reward_step(0.0, 60.0, cfg, 1, response=10.0) == pytest.approx(-10 * 0.99995**3600)


def test_reward_step_argument_errors():
    cfg = PlannerConfig()
    with pytest.raises(ValueError):
        reward_step(0.0, 0.0, cfg, 1)
    with pytest.raises(ValueError):
        reward_step(0.0, 0.0, cfg, 1, response=1.0, moved=[1.0])
    with pytest.raises(ValueError):
        reward_step(0.0, -1.0, cfg, 1, response=1.0)


@given(st.floats(-1e6, 0), st.floats(0, 600), st.floats(0, 1000), st.lists(st.floats(0, 50), min_size=1, max_size=5))
def test_rewards_never_increase(prev, t_h, response, moved):
    cfg = PlannerConfig()
    assert reward_step(prev, t_h, cfg, len(moved), response=response) <= prev
    assert reward_step(prev, t_h, cfg, len(moved), moved=moved) <= prev


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.5), dict(psi=-1.0), dict(iteration_limit=0),
                                dict(n_chains=0), dict(lookahead_horizon=0.0)])
def test_planner_config_validation(kw):
    with pytest.raises(ValueError):
        PlannerConfig(**kw)


# ---- UCB1 ---------------------------------------------------------------------------

def parent_with(stats):
    parent = TreeNode(None, 0, 0.0)
    for action, (mean, visits) in stats.items():
        child = TreeNode(None, 1, 0.0, action, parent)
        child.visits, child.total_value = visits, mean * visits
        parent.children[action] = child
        parent.visits += visits
    return parent


def test_ucb_single_child():
    assert ucb1_select(parent_with({4: (-3.0, 2)}), 1.41) == 4


def test_ucb_prefers_rarely_visited_on_equal_means():
    assert ucb1_select(parent_with({0: (-5.0, 100), 1: (-5.0, 1)}), 1.41) == 1


def test_ucb_example_from_means():
    parent = parent_with({0: (-5.0, 10), 1: (-6.0, 10)})
    assert parent.visits == 20
    scores = [m + 1.41 * math.sqrt(math.log(20) / 10) for m in (-5.0, -6.0)]
    assert scores[0] > scores[1]
    assert ucb1_select(parent, 1.41) == 0


def test_ucb_ties_go_to_lowest_action():
    assert ucb1_select(parent_with({3: (-5.0, 10), 1: (-5.0, 10), 2: (-5.0, 10)}), 1.0) == 1


def test_ucb_refuses_unexpanded_nodes():
    parent = parent_with({0: (-1.0, 1)})
    parent.untried = [1]
    with pytest.raises(ValueError):
        ucb1_select(parent, 1.0)
    with pytest.raises(ValueError):
        ucb1_select(TreeNode(None, 0, 0.0), 1.0)


# ---- action filter -------------------------------------------------------------------

def test_filter_single_agent_takes_best_valid():
    ranked = {0: [(2, -1.0), (0, -2.0), (1, -3.0)]}
    assert action_filter(ranked, {0: 1, 1: 1, 2: 0}) == {0: 0}


def test_filter_contention_example():
    ranked = {1: [(0, -5.0), (1, -7.0)], 2: [(0, -9.0), (2, -9.5)]}
    assert action_filter(ranked, {0: 1, 1: 1, 2: 1}) == {1: 0, 2: 2}


def test_filter_identity_when_everyone_stays():
    ranked = {a: [(a, -1.0)] + [(d, -2.0) for d in range(4) if d != a] for a in range(4)}
    assert action_filter(ranked, {d: 1 for d in range(4)}) == {a: a for a in range(4)}


def test_filter_falls_back_to_unranked_depots():
    ranked = {0: [(0, -1.0)], 1: [(0, -2.0)]}
    assert action_filter(ranked, {0: 1, 3: 1, 5: 1}) == {0: 0, 1: 3}


def test_filter_needs_enough_capacity():
    with pytest.raises(ValueError):
        action_filter({0: [(0, -1.0)], 1: [(0, -1.0)]}, {0: 1})


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_filter_is_safe_and_greedy(seed):
    rng = np.random.default_rng(seed)
    n_dep, n_agents = int(rng.integers(1, 7)), int(rng.integers(0, 7))
    cap = {d: int(rng.integers(0, 3)) for d in range(n_dep)}
    cap[0] += max(0, n_agents - sum(cap.values()))
    ranked = {}
    for a in range(n_agents):
        vals = [(d, float(rng.choice([-1.0, -2.0, -3.0, rng.uniform(-10, 0), -math.inf]))) for d in range(n_dep)]
        ranked[a] = sorted(vals, key=lambda kv: (-kv[1], kv[0]))
    out = action_filter(ranked, cap)
    assert sorted(out) == list(range(n_agents))
    for d in range(n_dep):
        assert sum(1 for v in out.values() if v == d) <= cap[d]


# ---- forward model and tree -----------------------------------------------------------

def test_static_expansion_moves_only_the_planning_agent():
    world, _ = toy_world()
    state = plan_state_from_world(sim_state(world, {0: 0, 1: 1, 2: 2}), world)
    scen = Scenario(0.0, 120.0, [(0.0, REBALANCE, -1)])
    search = AgentSearch(world, scen, 1, PlannerConfig(), state, random.Random(0))
    child = search.expand(search.root)
    moved = [j for j in range(3) if child.state.pos[j] != state.pos[j]]
    assert moved in ([], [1])
    assert child.state.pos[0] == state.pos[0] and child.state.pos[2] == state.pos[2]
    assert child.state.home[1] == child.action


def test_incident_expansion_charges_the_response():
    g = Grid(5, 1)
    depots = (Depot(0, 0),)
    world = PlanWorld(g, TravelModel(0.5), ServiceModel(0.1), depots)
    state = plan_state_from_world(initial_state(depots, {0: 0}), world)
    scen = Scenario(0.0, 60.0, [(0.0, INCIDENT, 1)])
    search = AgentSearch(world, scen, 0, PlannerConfig(), state, random.Random(0))
    assert search.root.untried == [None]
    assert search.expand(search.root).reward == pytest.approx(-2.0)


def test_queue_other_agent_model_follows_greedy_placement():
    world, rates = toy_world(3)
    cfg = PlannerConfig(other_agent_policy="queue", roi=2.0)
    trace = greedy_trace(2, world.depots, rates, world.sm, world.grid, world.tm, cfg.roi)
    others = [d.id for d in world.depots if d.id not in trace]
    state = plan_state_from_world(sim_state(world, {0: others[0], 1: others[1]}), world)
    scen = Scenario(0.0, 120.0, [(0.0, REBALANCE, -1)])
    search = AgentSearch(world, scen, 0, cfg, state, random.Random(0))
    search.root.untried = [trace[0]]
    child = search.expand(search.root)
    expected = greedy_place(1, world.depots, rates, world.sm, world.grid, world.tm, cfg.roi,
                            initial={trace[0]: 1})
    assert child.state.home[1] == next(d for d, n in expected.items() if n)


def test_rollout_without_incidents_keeps_the_reward():
    world, _ = toy_world()
    state = plan_state_from_world(sim_state(world, {0: 0}), world)
    search = AgentSearch(world, Scenario(0.0, 60.0, [(0.0, REBALANCE, -1)]), 0, PlannerConfig(), state,
                         random.Random(0))
    node = search.expand(search.root)
    assert search.rollout(node) == node.reward


def test_rollout_one_incident_three_minutes_away():
    g = Grid(5, 1)
    depots = (Depot(0, 0),)
    world = PlanWorld(g, TravelModel(1.0), ServiceModel(0.1), depots)
    state = plan_state_from_world(initial_state(depots, {0: 0}), world)
    scen = Scenario(0.0, 60.0, [(0.0, REBALANCE, -1), (10.0, INCIDENT, 3)])
    search = AgentSearch(world, scen, 0, PlannerConfig(alpha=1.0), state, random.Random(0))
    search.root.untried = [0]
    node = search.expand(search.root)
    assert search.rollout(node) == pytest.approx(node.reward - 3.0)


@pytest.mark.parametrize("mode", ["idle", "return"])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_rollout_matches_simulator_replay(mode, seed):
    world, rates = toy_world(seed, mode=mode)
    chain = sample_chain(RateMap(rates.rate_per_cell * 3, 0.0), 0.0, 200.0, seed)
    events = chain.events[:5]
    tail = IncidentChain(events, 0.0, 1000.0)
    placement = {0: 0, 1: 2}
    ctx = SimContext(world.grid, world.tm, world.sm, world.depots, post_service=mode)
    sim = run(initial_state(world.depots, placement), no_rebalance, tail, 5000.0, ctx)
    cfg = PlannerConfig(alpha=1.0, lookahead_horizon=1000.0, rebalance_period=5000.0)
    state = plan_state_from_world(initial_state(world.depots, placement), world)
    search = AgentSearch(world, build_scenario(tail, 0.0, cfg), 0, cfg, state, random.Random(0))
    assert search.rollout(search.root) == pytest.approx(-sum(r.response_min for r in sim.records), abs=1e-4)


def test_plan_state_projection_of_busy_agents():
    g = Grid(10, 1)
    depots = (Depot(0, 0), Depot(1, 9))
    world = PlanWorld(g, TravelModel(0.5), ServiceModel(0.1), depots, post_service="return")
    state = initial_state(depots, {0: 0, 1: 1})
    ctx = SimContext(g, world.tm, world.sm, depots)
    dispatch_nearest(state, IncidentEvent(0.0, 4, 0), ctx)  # agent 0: 4 mi, arrives at 8, done at 18
    ps = plan_state_from_world(state, world)
    assert ps.free_at[0] == pytest.approx(18.0 + 8.0) and ps.pos[0] == 0
    assert ps.job_end[0] == pytest.approx(18.0) and ps.job_cell[0] == 4
    assert ps.free_at[1] == -math.inf and ps.pos[1] == 9


def test_build_scenario_merges_rebalance_and_incidents():
    chain = IncidentChain((IncidentEvent(10.0, 3, 0), IncidentEvent(60.0, 4, 1), IncidentEvent(130.0, 1, 2)),
                          0.0, 200.0)
    scen = build_scenario(chain, 0.0, PlannerConfig(lookahead_horizon=120.0, rebalance_period=60.0))
    assert scen.events == [(0.0, REBALANCE, -1), (10.0, INCIDENT, 3), (60.0, REBALANCE, -1), (60.0, INCIDENT, 4)]


# ---- search ------------------------------------------------------------------------------

def searched(iterations, seed=0, policy="static", n_agents=3):
    world, rates = toy_world(seed)
    cfg = PlannerConfig(iteration_limit=iterations, other_agent_policy=policy, rebalance_period=30.0)
    chain = sample_chain(RateMap(rates.rate_per_cell * 2, 0.0), 0.0, 120.0, seed)
    state = plan_state_from_world(sim_state(world, {a: a for a in range(n_agents)}), world)
    search = AgentSearch(world, build_scenario(chain, 0.0, cfg), 0, cfg, state, random.Random(seed))
    search.search()
    return search, world


@pytest.mark.parametrize("policy", ["static", "queue"])
@pytest.mark.parametrize("seed", [0, 1])
def test_visit_conservation(policy, seed):
    search, world = searched(300, seed, policy)
    assert search.root.visits == 300
    for node in walk(search.root):
        assert node.visits == sum(c.visits for c in node.children.values()) + node.rollouts
        assert len(node.untried) + len(node.children) <= len(world.depot_ids)


def test_single_iteration_expands_once():
    search, _ = searched(1)
    assert search.root.visits == 1 and len(search.root.children) == 1
    assert sum(1 for _ in walk(search.root)) == 2


def test_search_is_deterministic():
    a, _ = searched(100, 4)
    b, _ = searched(100, 4)
    assert a.ranked() == b.ranked()


def test_oracle_toy_prefers_the_busy_depot():
    g = Grid(10, 1)
    depots = (Depot(0, 0), Depot(1, 9))
    world = PlanWorld(g, TravelModel(0.5), ServiceModel(1.0), depots)
    truth = [IncidentEvent(5.0 + 20 * k, 8, k) for k in range(6)]
    planner = Planner(world, PlannerConfig(iteration_limit=250, n_chains=1, psi=1.0), ground_truth=truth)
    ranked = mmcts(world, plan_state_from_world(initial_state(depots, {0: 0}), world), 0, planner.scenarios(0.0, 0),
                   planner.cfg)
    assert ranked[0][0] == 1


def test_zero_psi_ignores_distance(monkeypatch):
    world, rates = toy_world(5)
    cfg = PlannerConfig(iteration_limit=120, psi=0.0, rebalance_period=30.0, n_chains=2)
    planner = Planner(world, cfg)
    scens = planner.scenarios(0.0, 9)
    state = plan_state_from_world(sim_state(world, {0: 0, 1: 1}), world)
    before = mmcts(world, state, 0, scens, cfg, seed=1)
    original = PlanState.move
    monkeypatch.setattr(PlanState, "move", lambda self, *a: 7.0 * original(self, *a) + 3.0)
    after = mmcts(world, state, 0, scens, cfg, seed=1)
    assert before == after
    cfg.psi = 10.0
    assert mmcts(world, state, 0, scens, cfg, seed=1) != after


# ---- planner ----------------------------------------------------------------------------

def test_plan_with_nobody_available():
    world, rates = toy_world()
    state = sim_state(world, {0: 0})
    state.responders[0].status = Status.SERVICING
    state.responders[0].busy_until = 50.0
    assert Planner(world, PlannerConfig(iteration_limit=5)).plan(state, {d: 1 for d in world.depot_ids}) == {}


def test_plan_single_agent_single_depot():
    g = Grid(3, 3)
    depots = (Depot(0, 4),)
    world = PlanWorld(g, TravelModel(0.5), ServiceModel(0.1), depots, RateMap(np.full(9, 0.01), 0.0))
    out = Planner(world, PlannerConfig(iteration_limit=10, n_chains=2)).plan(initial_state(depots, {0: 0}), {0: 1})
    assert out == {0: 0}


@pytest.mark.parametrize("policy", ["static", "queue"])
def test_plan_is_reproducible_and_feasible(policy):
    world, rates = toy_world(8, n_depots=4)
    cfg = PlannerConfig(iteration_limit=40, n_chains=2, other_agent_policy=policy)
    state = sim_state(world, {0: 0, 1: 1, 2: 3})
    cap = {d: 1 for d in world.depot_ids}
    a = Planner(world, cfg).plan(state, cap, seed=3)
    b = Planner(world, cfg).plan(state, cap, seed=3)
    assert a == b
    assert sorted(a) == [0, 1, 2] and len(set(a.values())) == 3


def test_sampled_planning_needs_rates():
    world, _ = toy_world()
    world.rates = None
    with pytest.raises(ValueError):
        Planner(world, PlannerConfig()).scenarios(0.0, 0)
