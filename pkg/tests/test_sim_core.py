"""Core engine: movement authority, kinematics, interlocking, invariants."""
from __future__ import annotations

import pytest

from railsched.params import SimParams
from railsched.route_model import UP, DOWN, Block, RouteModel
from railsched.sim_core import (
    EVENT_DISRUPTION_BEGIN, EVENT_DISRUPTION_END, EVENT_LOCK, EVENT_REJECT,
    PROCEED, STOP, Disruption, Placement, ProceedWithoutLock, RequestRoute,
    SetSignal, SimError, TrainPhase, TrainState, UnknownControlPoint,
    check_invariants, init_sim, kinematic_step, movement_authority,
    release_route, request_route, set_signal, speed_targets, step,
)


def chain_model() -> RouteModel:
    """A plain up-direction chain: 1000 / 800 / 600 / 400 / 400 metres."""
    blocks = [
        Block("c1", 1000, 30, succ_up=["c2"]),
        Block("c2", 800, 30, succ_up=["c3"], succ_down=["c1"]),
        Block("c3", 600, 30, succ_up=["c4"], succ_down=["c2"]),
        Block("c4", 400, 30, succ_up=["c5"], succ_down=["c3"]),
        Block("c5", 400, 30, succ_down=["c4"]),
    ]
    return RouteModel([], blocks, [])


def running(train: str, block: str, offset: float, velocity: float = 0.0) -> Placement:
    return Placement(train=train, block=block, offset=offset, direction=UP,
                     velocity=velocity, phase=TrainPhase.RUNNING)


# -- movement authority ------------------------------------------------------


def test_authority_sums_free_blocks_up_to_occupied():
    state = init_sim(chain_model(), [
        running("t1", "c1", 200.0),
        running("t2", "c5", 400.0),
    ])
    t1 = state.trains["t1"]
    dist, path = movement_authority(state, t1)
    # 800 m left in c1, then 800 + 600 + 400 free; c5 is occupied
    assert dist == 2600.0
    assert path == ["c2", "c3", "c4"]


def test_authority_capped_at_lookahead():
    params = SimParams(lookahead_m=1000.0)
    state = init_sim(chain_model(), [running("t1", "c1", 200.0)], params)
    dist, _ = movement_authority(state, state.trains["t1"])
    assert dist == 1000.0


def test_authority_stops_at_disrupted_block():
    state = init_sim(chain_model(), [running("t1", "c1", 200.0)])
    state.disruptions.append(Disruption(blocks={"c3"}, start_s=0, duration_s=3600))
    dist, path = movement_authority(state, state.trains["t1"])
    assert dist == 1600.0
    assert path == ["c2"]


def test_speed_targets_align_with_path():
    model = chain_model()
    model.blocks["c3"].vmax_mps = 10.0
    state = init_sim(model, [running("t1", "c1", 200.0)])
    t1 = state.trains["t1"]
    _, path = movement_authority(state, t1)
    targets = speed_targets(state, t1, path)
    assert targets[0] == (800.0, 30.0)
    assert targets[1] == (1600.0, 10.0)


# -- kinematics --------------------------------------------------------------


def test_pullaway_from_rest():
    t = TrainState("t", "c1", 200.0, UP, 150.0, 600, velocity=0.0)
    v, dx = kinematic_step(t, 5000.0, 30.0, [], SimParams())
    assert v == pytest.approx(0.8)
    assert dx == pytest.approx(0.4)


def test_brake_toward_short_authority():
    t = TrainState("t", "c1", 200.0, UP, 150.0, 600, velocity=10.0)
    v, dx = kinematic_step(t, 20.0, 30.0, [], SimParams())
    assert v == pytest.approx(9.0)
    assert dx == pytest.approx(9.5)


def test_civil_limit_holds():
    t = TrainState("t", "c1", 200.0, UP, 150.0, 600, velocity=12.0)
    v, _ = kinematic_step(t, 5000.0, 12.0, [], SimParams())
    assert v == 12.0


def test_comes_to_rest_exactly_at_boundary():
    params = SimParams()
    t = TrainState("t", "c1", 200.0, UP, 150.0, 600, velocity=0.0)
    remaining = 500.0
    for _ in range(600):
        v, dx = kinematic_step(t, remaining, 30.0, [], params)
        t.velocity = v
        remaining -= dx
        assert remaining >= 0.0
        if v == 0.0 and dx == 0.0:
            break
    assert t.velocity == 0.0
    assert remaining == 0.0


def test_branch_limit_respected_while_passing():
    """Crossing into a slower block never leaves the train above its limit."""
    params = SimParams()
    model = chain_model()
    model.blocks["c2"].vmax_mps = 8.0
    state = init_sim(model, [running("t1", "c1", 200.0, velocity=20.0)], params)
    for _ in range(120):
        step(state, [])
        for problem in check_invariants(state):
            raise AssertionError(problem)


# -- stepping ----------------------------------------------------------------


def test_empty_step_advances_clock():
    state = init_sim(chain_model(), [])
    events = step(state, [])
    assert state.clock == 1
    assert events == []


def test_disruption_edge_events():
    state = init_sim(chain_model(), [])
    state.disruptions.append(Disruption(blocks={"c2"}, start_s=2, duration_s=3))
    kinds = []
    for _ in range(7):
        kinds.extend(ev["kind"] for ev in step(state, []))
    assert kinds.count(EVENT_DISRUPTION_BEGIN) == 1
    assert kinds.count(EVENT_DISRUPTION_END) == 1


def test_train_runs_down_the_chain():
    state = init_sim(chain_model(), [running("t1", "c1", 200.0)])
    for _ in range(300):
        step(state, [])
        assert check_invariants(state) == []
    t1 = state.trains["t1"]
    assert t1.head_block == "c5"
    assert t1.velocity == 0.0


# -- placements --------------------------------------------------------------


def test_placement_on_unknown_block_rejected():
    with pytest.raises(SimError, match="unknown block"):
        init_sim(chain_model(), [running("t1", "zz", 200.0)])


def test_placement_overlap_rejected():
    with pytest.raises(SimError, match="overlap"):
        init_sim(chain_model(), [running("a", "c1", 200.0),
                                 running("b", "c1", 900.0)])


def test_placement_duplicate_train_rejected():
    with pytest.raises(SimError, match="duplicate"):
        init_sim(chain_model(), [running("a", "c1", 200.0),
                                 running("a", "c2", 200.0)])


def test_placement_must_fit_inside_block():
    with pytest.raises(SimError, match="not fully inside"):
        init_sim(chain_model(), [running("t1", "c4", 100.0)])  # shorter than the train


def test_sixteen_trains_on_distinct_blocks(fx):
    blocks = sorted(b.id for b in fx.model.blocks.values() if b.length_m >= 150)
    assert len(blocks) >= 16
    placements = [Placement(train=f"x{i:02d}", block=b,
                            offset=fx.model.blocks[b].length_m, direction=UP)
                  for i, b in enumerate(blocks[:16])]
    state = init_sim(fx.model, placements, fx.params)
    assert len(state.trains) == 16
    assert check_invariants(state) == []


# -- interlocking ------------------------------------------------------------


def test_set_signal_unknown_point():
    with pytest.raises(UnknownControlPoint):
        set_signal(init_sim(chain_model(), []), "nope", PROCEED)


def test_junction_proceed_needs_lock(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    with pytest.raises(ProceedWithoutLock):
        set_signal(state, route.entry_signal, PROCEED)
    assert request_route(state, junction, route.id).granted
    set_signal(state, route.entry_signal, PROCEED)   # idempotent now
    set_signal(state, route.entry_signal, PROCEED)
    assert state.signal_aspects[route.entry_signal] == PROCEED


def test_route_grant_locks_and_clears_signal(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    decision = request_route(state, junction, route.id)
    assert decision.granted
    assert state.signal_aspects[route.entry_signal] == PROCEED
    assert any(ev["kind"] == EVENT_LOCK for ev in state.log)
    # same request again is a harmless re-grant
    assert request_route(state, junction, route.id).granted


def test_conflicting_route_denied(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = next(j for j in fx.model.junctions.values()
                    if any(r.conflicts for r in j.routes))
    first = junction.routes[0]
    other = junction.route(first.conflicts[0])
    assert request_route(state, junction.id, first.id).granted
    decision = request_route(state, junction.id, other.id)
    assert not decision.granted
    assert decision.reason == "conflict"


def test_occupied_route_denied(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    target = route.blocks[0]
    placement = Placement(train="t", block=target,
                          offset=fx.model.blocks[target].length_m, direction=UP)
    state2 = init_sim(fx.model, [placement], fx.params)
    decision = request_route(state2, junction, route.id)
    assert not decision.granted
    assert decision.reason == f"occupied:{target}"


def test_disrupted_route_denied(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    state.disruptions.append(Disruption(blocks=set(route.blocks), start_s=0,
                                        duration_s=600))
    decision = request_route(state, junction, route.id)
    assert not decision.granted
    assert decision.reason.startswith("disrupted:")


def test_unknown_junction_and_route_denied(fx):
    state = init_sim(fx.model, [], fx.params)
    assert not request_route(state, "nope", "r").granted
    junction = sorted(fx.model.junctions)[0]
    assert not request_route(state, junction, "nope").granted


def test_release_route(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    assert not release_route(state, junction, route.id)   # nothing locked yet
    assert request_route(state, junction, route.id).granted
    assert release_route(state, junction, route.id)
    assert state.route_locks[junction] is None
    assert state.signal_aspects[route.entry_signal] == STOP


def test_release_refused_with_train_inside(fx):
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    target = route.blocks[0]
    placement = Placement(train="t", block=target,
                          offset=fx.model.blocks[target].length_m, direction=UP)
    state = init_sim(fx.model, [placement], fx.params,
                     locks={junction: (route.id, False)})
    assert not release_route(state, junction, route.id)


def test_invalid_commands_become_reject_events(fx):
    state = init_sim(fx.model, [], fx.params)
    junction = sorted(fx.model.junctions)[0]
    route = fx.model.junctions[junction].routes[0]
    events = step(state, [SetSignal(route.entry_signal, PROCEED),
                          RequestRoute("nope", "nope")])
    rejects = [ev for ev in events if ev["kind"] == EVENT_REJECT]
    assert len(rejects) == 2


# -- invariants --------------------------------------------------------------


def test_invariants_clean_on_fixture_start(fx):
    start = fx.start_at(27000)
    state = init_sim(fx.model, start.placements, fx.params,
                     signals=start.signals, locks=start.locks,
                     clock=start.clock)
    assert check_invariants(state) == []


def test_overspeed_tolerance_boundary():
    state = init_sim(chain_model(), [running("t1", "c1", 200.0)])
    t1 = state.trains["t1"]
    t1.velocity = 30.0 + 5e-10
    assert check_invariants(state) == []
    t1.velocity = 30.0 + 1e-6
    assert any("overspeed" in p for p in check_invariants(state))


def test_moving_while_dwelling_flagged():
    state = init_sim(chain_model(), [running("t1", "c1", 200.0)])
    t1 = state.trains["t1"]
    t1.phase = TrainPhase.DWELLING
    t1.velocity = 0.5
    assert any("moving while" in p for p in check_invariants(state))


def test_block_exclusivity_flagged():
    state = init_sim(chain_model(), [running("a", "c1", 200.0),
                                     running("b", "c2", 200.0)])
    state.trains["b"].trail.append("c1")
    assert any("occupied by" in p for p in check_invariants(state))
