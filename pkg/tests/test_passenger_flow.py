"""Demand accumulation, boarding/alighting and the conservation ledger."""
from __future__ import annotations

import numpy as np
import pytest

from railsched.passenger_flow import (
    ODMatrix, PassengerGroup, PassengerWorld, parse_od_csv, serialize_od_csv,
)
from railsched.route_model import UP, DOWN, parse_route_config
from railsched.sim_core import TrainState

LINE = """
stations:
- id: a
  name: Alpha
  platforms:
  - {id: pa, block: pa, capacity: 200}
- id: b
  name: Beta
  platforms:
  - {id: pb, block: pb, capacity: 200}
- id: c
  name: Gamma
  platforms:
  - {id: pc, block: pc, capacity: 200}
blocks:
- {id: pa, length_m: 200, vmax_mps: 15, platform: true, succ_up: [r1]}
- {id: r1, length_m: 800, vmax_mps: 25, succ_up: [pb], succ_down: [pa]}
- {id: pb, length_m: 200, vmax_mps: 15, platform: true, succ_up: [r2], succ_down: [r1]}
- {id: r2, length_m: 800, vmax_mps: 25, succ_up: [pc], succ_down: [pb]}
- {id: pc, length_m: 200, vmax_mps: 15, platform: true, succ_down: [r2]}
"""


def make_world(records, **kw) -> PassengerWorld:
    model = parse_route_config(LINE)
    return PassengerWorld(model, ODMatrix(records), **kw)


def make_train(capacity: int = 100, direction: str = UP) -> TrainState:
    return TrainState("t", "pa", 200.0, direction, 150.0, capacity)


# -- OD matrix ---------------------------------------------------------------


def test_rate_is_piecewise_constant():
    od = ODMatrix([("a", "b", 0, 1.5), ("a", "b", 100, 0.25)])
    assert od.rate("a", "b", 0) == 1.5
    assert od.rate("a", "b", 99) == 1.5
    assert od.rate("a", "b", 100) == 0.25
    assert od.rate("a", "b", 5000) == 0.25
    assert od.rate("b", "a", 50) == 0.0


def test_rate_before_first_bucket_is_zero():
    od = ODMatrix([("a", "b", 100, 2.0)])
    assert od.rate("a", "b", 99) == 0.0


def test_records_round_trip():
    rows = [("a", "b", 0, 1.5), ("a", "b", 100, 0.25), ("b", "c", 0, 0.1)]
    od = ODMatrix(rows)
    assert od.records() == sorted(rows)
    again = parse_od_csv(serialize_od_csv(od.records()))
    assert again.records() == od.records()


def test_self_loop_rejected():
    with pytest.raises(ValueError, match="self-loop"):
        ODMatrix([("a", "a", 0, 1.0)])


def test_negative_rate_rejected():
    with pytest.raises(ValueError, match="negative"):
        ODMatrix([("a", "b", 0, -1.0)])


# -- deterministic accumulator -----------------------------------------------


def test_two_per_second_rate():
    world = make_world([("a", "b", 0, 2.0)])
    total = sum(world.generate_arrivals(t) for t in range(10))
    assert total == 20
    assert world.generated == 20


def test_fractional_rate_accumulates():
    world = make_world([("a", "b", 0, 0.3)])
    total = sum(world.generate_arrivals(t) for t in range(10))
    assert total == 3


def test_unservable_pairs_ignored():
    world = make_world([("a", "zz", 0, 5.0)])
    assert sum(world.generate_arrivals(t) for t in range(10)) == 0


def test_stochastic_mode_reproducible():
    draws = []
    for _ in range(2):
        world = make_world([("a", "b", 0, 1.0)], seed=42, stochastic=True)
        draws.append([world.generate_arrivals(t) for t in range(50)])
    assert draws[0] == draws[1]
    mean = np.mean(draws[0])
    assert 0.5 < mean < 1.5   # Poisson(1), 50 samples


# -- exchange ----------------------------------------------------------------


def test_boarding_splits_at_capacity():
    world = make_world([("a", "c", 0, 1.0)])
    world.queues[("a", UP)].append(PassengerGroup(120, "a", "c", 0))
    world.generated += 120
    train = make_train(capacity=100)
    train.onboard.append(PassengerGroup(30, "a", "c", 0))
    alighted, boarded = world.exchange_at_platform(train, "a")
    assert alighted == 0
    assert boarded == 70
    assert train.onboard_count() == 100
    assert world.station_waiting("a") == 50


def test_alighting_counts_arrivals():
    world = make_world([("a", "b", 0, 1.0)])
    train = make_train()
    train.onboard.append(PassengerGroup(25, "a", "b", 0))
    train.onboard.append(PassengerGroup(10, "a", "c", 0))
    alighted, boarded = world.exchange_at_platform(train, "b")
    assert alighted == 25
    assert world.arrived == 25
    assert train.onboard_count() == 10


def test_boarding_is_fifo_by_creation_time():
    world = make_world([("a", "c", 0, 1.0)])
    world.queues[("a", UP)].append(PassengerGroup(40, "a", "c", created_at=60))
    world.queues[("a", UP)].append(PassengerGroup(40, "a", "c", created_at=10))
    world.generated += 80
    train = make_train(capacity=50)
    world.exchange_at_platform(train, "a")
    assert train.onboard_count() == 50
    # the older group boarded whole; the newer one was split
    assert {g.created_at for g in train.onboard} == {10, 60}
    left = world.queues[("a", UP)]
    assert len(left) == 1 and left[0].created_at == 60 and left[0].count == 30


def test_wrong_way_passengers_do_not_board():
    world = make_world([("b", "a", 0, 1.0), ("b", "c", 0, 1.0)])
    world.queues[("b", DOWN)].append(PassengerGroup(10, "b", "a", 0))
    world.queues[("b", UP)].append(PassengerGroup(10, "b", "c", 0))
    world.generated += 20
    train = make_train(direction=UP)
    _, boarded = world.exchange_at_platform(train, "b")
    assert boarded == 10
    assert all(g.destination == "c" for g in train.onboard)


def test_load_factor_levels():
    train = make_train(capacity=100)
    assert train.load_factor() == 0.0
    train.onboard.append(PassengerGroup(100, "a", "b", 0))
    assert train.load_factor() == 1.0
    train.onboard.append(PassengerGroup(50, "a", "b", 0))
    assert train.load_factor() == 1.5


def test_congestion_excess_means_over_running_trains():
    world = make_world([("a", "b", 0, 1.0)])
    full = make_train(capacity=100)
    full.onboard.append(PassengerGroup(150, "a", "b", 0))
    empty = make_train(capacity=100)
    assert world.congestion_excess([full, empty]) == pytest.approx(0.25)
    assert world.congestion_excess([empty]) == 0.0
    assert world.congestion_excess([]) == 0.0


# -- station capacity and the outside pool -----------------------------------


def test_station_overflow_waits_outside():
    world = make_world([("a", "b", 0, 1.0)])
    world.queues[("a", UP)].append(PassengerGroup(195, "a", "b", 0))
    world.generated += 195
    world._admit(PassengerGroup(10, "a", "b", 1), 1)
    world.generated += 10
    assert world.station_waiting("a") == 195
    assert sum(g.count for g in world.outside["a"]) == 10
    assert world.waiting_total() == 205


def test_outside_pool_admitted_fifo_when_room():
    world = make_world([("a", "b", 0, 1.0)])
    world.queues[("a", UP)].append(PassengerGroup(200, "a", "b", 0))
    world.outside["a"].append(PassengerGroup(30, "a", "b", 1))
    world.outside["a"].append(PassengerGroup(30, "a", "b", 2))
    world.generated += 260
    train = make_train(capacity=50)
    world.exchange_at_platform(train, "a")
    # 50 boarded, room for 50: first outside group whole, second split
    assert world.station_waiting("a") == 200
    outside = world.outside["a"]
    assert len(outside) == 1 and outside[0].count == 10 and outside[0].created_at == 2


# -- reversal and withdrawal -------------------------------------------------


def test_rebalance_after_reversal_offloads_wrong_way():
    world = make_world([("b", "a", 0, 1.0)])
    train = make_train(direction=DOWN)
    train.onboard.append(PassengerGroup(20, "a", "c", 0))   # now wrong way
    train.onboard.append(PassengerGroup(15, "c", "a", 0))   # still fine
    moved = world.rebalance_after_reversal(train, "b")
    assert moved == 20
    assert train.onboard_count() == 15
    assert sum(g.count for g in world.queues[("b", UP)]) == 20


def test_evacuate_empties_train():
    world = make_world([("a", "c", 0, 1.0)])
    train = make_train()
    train.onboard.append(PassengerGroup(5, "a", "b", 0))
    train.onboard.append(PassengerGroup(7, "a", "c", 0))
    moved = world.evacuate(train, "b")
    assert moved == 12
    assert train.onboard == []
    assert world.arrived == 5                      # those bound for b arrived
    assert sum(g.count for g in world.queues[("b", UP)]) == 7


def test_conservation_ledger_balances():
    world = make_world([("a", "c", 0, 0.7), ("c", "a", 0, 0.4)])
    train = make_train(capacity=80)
    for t in range(200):
        world.generate_arrivals(t)
        if t % 40 == 20:
            world.exchange_at_platform(train, "a")
        assert world.conservation_error([train]) == 0


def test_group_validation():
    with pytest.raises(ValueError):
        PassengerGroup(0, "a", "b", 0)
    with pytest.raises(ValueError):
        PassengerGroup(5, "a", "a", 0)
