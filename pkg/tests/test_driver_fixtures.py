"""Whole-line service runs on the bundled fixture."""
from __future__ import annotations

import pytest

from railsched.driver import ServiceDriver
from railsched.fixtures import disruption_scenario, service_fixture
from railsched.sim_core import (
    EVENT_ARRIVE, EVENT_STOP_BEGIN, Disruption, check_invariants,
)
from railsched.timetable import extract_operation_rules


def make_driver(fx, start_s: int, disruptions=(), with_od: bool = True,
                seed: int = 0) -> ServiceDriver:
    rules = extract_operation_rules(fx.model, fx.timetable, fx.params)
    return ServiceDriver(fx.model, fx.params, fx.start_at(start_s),
                         rules=rules, od=fx.od if with_od else None,
                         seed=seed, disruptions=list(disruptions))


def test_start_states_are_valid(fx):
    for t0 in (25200, 27000, 43200):
        start = fx.start_at(t0)
        assert start.clock == t0
        blocks = [p.block for p in start.placements]
        assert len(blocks) == len(set(blocks))
        driver = make_driver(fx, t0, with_od=False)
        assert check_invariants(driver.state) == []


def test_undisrupted_hour_is_punctual(fx):
    """One clean hour: every realized arrival within 5 s of the plan and no
    interstation stops."""
    driver = make_driver(fx, 27000)
    arrivals = []

    scheduled = {}
    for train, rows in fx.timetable.by_train.items():
        for e in rows:
            scheduled.setdefault((train, e.station), []).append(e.arrive_s)

    for _ in range(3600):
        for ev in driver.tick():
            if ev["kind"] == EVENT_ARRIVE:
                arrivals.append(ev)
            assert ev["kind"] != EVENT_STOP_BEGIN
    assert len(arrivals) > 20
    for ev in arrivals:
        slots = scheduled.get((ev["train"], ev["station"]), [])
        assert slots and min(abs(s - ev["t"]) for s in slots) <= 5


def test_conservation_exact_every_second(fx):
    driver = make_driver(fx, 27000)
    for _ in range(1200):
        driver.tick()
        assert driver.conservation_error() == 0
    world = driver.world
    assert world.generated == (world.waiting_total()
                               + world.onboard_total(driver.state.trains.values())
                               + world.arrived)
    assert driver.arrived() > 0


def test_disruption_causes_interstation_stops(fx):
    d = Disruption(blocks={"r45u", "r54d"}, start_s=27180, duration_s=1800)
    driver = make_driver(fx, 27000, disruptions=[d])
    stop_events_after_clear = 0
    first_stop_t = None
    for _ in range(5400):
        for ev in driver.tick():
            if ev["kind"] == EVENT_STOP_BEGIN:
                if first_stop_t is None:
                    first_stop_t = ev["t"]
                if ev["t"] >= 27180 + 1800:
                    stop_events_after_clear += 1
    assert first_stop_t is not None
    assert driver.totals.stop_seconds > 0
    assert stop_events_after_clear >= 1   # jam outlives the blockage


def test_disrupted_run_stays_safe(fx):
    d = Disruption(blocks={"r45u", "r54d"}, start_s=27180, duration_s=600)
    driver = make_driver(fx, 27000, disruptions=[d])
    for i in range(1800):
        driver.tick()
        if i % 60 == 0:
            assert check_invariants(driver.state) == []


def test_totals_track_events(fx):
    d = Disruption(blocks={"r45u", "r54d"}, start_s=27180, duration_s=1800)
    driver = make_driver(fx, 27000, disruptions=[d])
    begins = 0
    for _ in range(3600):
        begins += sum(1 for ev in driver.tick() if ev["kind"] == EVENT_STOP_BEGIN)
    assert driver.totals.stop_events == begins
    assert driver.totals.seconds == 3600
    assert driver.totals.speed_samples > 0


def test_positions_reported_for_live_trains(fx):
    driver = make_driver(fx, 27000, with_od=False)
    pos = driver.positions()
    live = [p for p in pos.values() if p is not None]
    assert live
    lo = fx.model.line_low
    hi = fx.model.line_high
    assert all(lo <= p <= hi for p in live)


def test_scenario_payload_matches_driver_state(fx):
    doc = disruption_scenario()
    assert doc["sim_start_s"] == doc["start"]["clock"]
    ids = [p["train"] for p in doc["start"]["placements"]]
    assert len(ids) == len(set(ids))
    assert doc["disruptions"][0]["duration_s"] == 1800


def test_service_fixture_is_cached():
    assert service_fixture() is service_fixture()
