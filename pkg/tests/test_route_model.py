"""Route config parsing, derived geometry and control points."""
from __future__ import annotations

import pytest

from railsched.route_model import (
    DEPARTURE, DOWN, JUNCTION, RouteConfigError, UP, load_route_model,
    models_equal, opposite, parse_route_config, serialize_route_config,
)

TWO_STATION = """
stations:
- id: a
  name: Alpha
  platforms:
  - {id: pa, block: pa, capacity: 100}
- id: b
  name: Beta
  platforms:
  - {id: pb, block: pb, capacity: 100}
blocks:
- {id: pa, length_m: 200, vmax_mps: 15, platform: true, succ_up: [r1]}
- {id: r1, length_m: 800, vmax_mps: 25, succ_up: [pb], succ_down: [pa]}
- {id: pb, length_m: 200, vmax_mps: 15, platform: true, succ_down: [r1]}
"""


def test_two_station_line_parses():
    m = parse_route_config(TWO_STATION)
    assert sorted(m.stations) == ["a", "b"]
    assert sorted(m.blocks) == ["pa", "pb", "r1"]
    assert m.junctions == {}


def test_two_station_control_points():
    m = parse_route_config(TWO_STATION)
    # one departure signal per servable direction of each platform block:
    # pa can only depart up, pb only down.
    cps = list(m.control_points.values())
    assert len(cps) == 2
    assert all(cp.kind == DEPARTURE for cp in cps)
    assert {(cp.block, cp.direction) for cp in cps} == {("pa", UP), ("pb", DOWN)}


def test_two_station_geometry():
    m = parse_route_config(TWO_STATION)
    assert m.block_span["pa"] == (0.0, 200.0)
    assert m.block_span["r1"] == (200.0, 1000.0)
    assert m.block_span["pb"] == (1000.0, 1200.0)
    assert m.station_pos["a"] == 0.0
    assert m.station_pos["b"] == 1000.0
    assert (m.line_low, m.line_high) == (0.0, 1200.0)


def test_ordered_stations_by_position():
    m = parse_route_config(TWO_STATION)
    assert [s.id for s in m.ordered_stations()] == ["a", "b"]


def test_travel_and_serves_direction():
    m = parse_route_config(TWO_STATION)
    assert m.travel_direction("a", "b") == UP
    assert m.travel_direction("b", "a") == DOWN
    assert m.serves_direction("a", "b", UP)
    assert not m.serves_direction("a", "b", DOWN)


def test_opposite():
    assert opposite(UP) == DOWN
    assert opposite(DOWN) == UP


def test_unknown_successor_rejected():
    bad = TWO_STATION.replace("succ_up: [pb]", "succ_up: [nope]")
    with pytest.raises(RouteConfigError) as err:
        parse_route_config(bad)
    assert any("unknown block nope" in v for v in err.value.violations)


def test_non_positive_length_rejected():
    bad = TWO_STATION.replace("id: r1, length_m: 800", "id: r1, length_m: 0")
    with pytest.raises(RouteConfigError) as err:
        parse_route_config(bad)
    assert any("non-positive length" in v for v in err.value.violations)


def test_platform_flag_required():
    bad = TWO_STATION.replace("id: pb, length_m: 200, vmax_mps: 15, platform: true",
                              "id: pb, length_m: 200, vmax_mps: 15")
    with pytest.raises(RouteConfigError):
        parse_route_config(bad)


def test_missing_required_key_rejected():
    with pytest.raises(RouteConfigError) as err:
        parse_route_config("blocks:\n- {length_m: 5, vmax_mps: 5}\n")
    assert any("id" in v for v in err.value.violations)


def test_syntax_error_reported():
    with pytest.raises(RouteConfigError) as err:
        parse_route_config("stations: [}{")
    assert "syntax error" in err.value.violations[0]


def test_serialize_round_trip():
    m = parse_route_config(TWO_STATION)
    again = parse_route_config(serialize_route_config(m))
    assert models_equal(m, again)


def test_fixture_file_round_trip(fx, fixture_paths):
    loaded = load_route_model(fixture_paths["route"])
    assert models_equal(loaded, fx.model)


def test_fixture_shape(fx):
    m = fx.model
    stations = m.ordered_stations()
    assert len(stations) == 8
    turnbacks = [s.id for s in stations if s.can_turn_back]
    # both terminals plus two intermediate turnaround stations
    assert stations[0].id in turnbacks and stations[-1].id in turnbacks
    assert len(turnbacks) == 4


def test_fixture_junction_conflicts_symmetric(fx):
    for j in fx.model.junctions.values():
        for r in j.routes:
            for c in r.conflicts:
                assert r.id in j.route(c).conflicts


def test_entry_routes_index(fx):
    m = fx.model
    for j in m.junctions.values():
        for r in j.routes:
            assert (j.id, r.id) in m.entry_routes(r.blocks[0])


def test_reachability_cache_consistent(fx):
    m = fx.model
    stations = [s.id for s in m.ordered_stations()]
    first, last = stations[0], stations[-1]
    assert m.travel_direction(first, last) == UP
    assert m.travel_direction(last, first) == DOWN
    # asking twice hits the cache and must agree
    assert m.travel_direction(first, last) == UP


def test_junction_control_points_registered(fx):
    m = fx.model
    junction_cps = [cp for cp in m.control_points.values() if cp.kind == JUNCTION]
    assert len(junction_cps) == sum(len(j.routes) for j in m.junctions.values())
    for cp in junction_cps:
        assert m.junctions[cp.junction].route(cp.route).entry_signal == cp.id
