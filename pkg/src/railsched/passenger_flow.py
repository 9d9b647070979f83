"""Passenger demand, platform queues and train loading.

Arrivals are deterministic by default: each (origin, destination) pair carries
a fractional accumulator fed by the OD rate; whenever it crosses an integer a
group of that size joins the queue.  A seeded Poisson mode is available for
stochastic studies.  People are conserved exactly: generated = waiting (inside
or outside the station) + onboard + arrived, always in whole persons.
"""
from __future__ import annotations

import csv
import io
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .route_model import DIRECTIONS, RouteModel


@dataclass
class PassengerGroup:
    count: int
    origin: str
    destination: str
    created_at: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("group count must be positive")
        if self.origin == self.destination:
            raise ValueError("origin and destination must differ")


class ODMatrix:
    """Piecewise-constant arrival rates (persons/second) per station pair.

    Records are (origin, destination, bucket_start_s, rate_pps); the rate for
    a pair holds from its bucket start until the next record's start.
    """

    def __init__(self, records: Iterable[Tuple[str, str, int, float]]):
        self._steps: Dict[Tuple[str, str], Tuple[List[int], List[float]]] = {}
        for o, d, start, rate in records:
            if o == d:
                raise ValueError(f"self-loop OD entry {o}->{d}")
            if rate < 0:
                raise ValueError(f"negative rate for {o}->{d}")
            self._steps.setdefault((o, d), ([], []))
        for o, d, start, rate in sorted(records, key=lambda r: (r[0], r[1], r[2])):
            starts, rates = self._steps[(o, d)]
            starts.append(int(start))
            rates.append(float(rate))
        self.pairs: List[Tuple[str, str]] = sorted(self._steps)

    def rate(self, origin: str, destination: str, t: int) -> float:
        entry = self._steps.get((origin, destination))
        if not entry:
            return 0.0
        starts, rates = entry
        i = bisect_right(starts, t) - 1
        return rates[i] if i >= 0 else 0.0

    def rates_at(self, t: int) -> np.ndarray:
        return np.array([self.rate(o, d, t) for o, d in self.pairs], dtype=float)

    def records(self) -> List[Tuple[str, str, int, float]]:
        """Sorted (origin, destination, bucket_start_s, rate_pps) rows."""
        out: List[Tuple[str, str, int, float]] = []
        for o, d in self.pairs:
            starts, rates = self._steps[(o, d)]
            out.extend((o, d, s, r) for s, r in zip(starts, rates))
        return out


def load_od_matrix(path: str) -> ODMatrix:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_od_csv(fh.read())


def parse_od_csv(text: str) -> ODMatrix:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append((row["origin"], row["destination"],
                     int(row["bucket_start_s"]), float(row["rate_pps"])))
    return ODMatrix(rows)


def serialize_od_csv(records: Iterable[Tuple[str, str, int, float]]) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["origin", "destination", "bucket_start_s", "rate_pps"])
    for r in records:
        w.writerow(list(r))
    return out.getvalue()


class PassengerWorld:
    """Queues, outside pools, onboard loads and the conservation ledger."""

    def __init__(self, model: RouteModel, od: ODMatrix, seed: int = 0,
                 stochastic: bool = False):
        self.model = model
        self.od = od
        self.stochastic = stochastic
        self.rng = np.random.Generator(np.random.PCG64(seed))
        # pairs that can actually be served, with their boarding direction
        self.pair_dir: Dict[Tuple[str, str], str] = {}
        usable = []
        for o, d in od.pairs:
            if o in model.stations and d in model.stations:
                direction = model.travel_direction(o, d)
                if direction is not None:
                    self.pair_dir[(o, d)] = direction
                    usable.append((o, d))
        self.pairs = usable
        self._acc = np.zeros(len(usable), dtype=float)
        # rates only change at bucket starts; cache the vector per interval
        marks = sorted({s for (o, d) in usable for s in od._steps[(o, d)][0]})
        self._marks = marks
        self._cached_idx = None
        self._cached_rates = np.zeros(len(usable), dtype=float)
        self.queues: Dict[Tuple[str, str], List[PassengerGroup]] = {
            (s, d): [] for s in model.stations for d in DIRECTIONS}
        self.outside: Dict[str, List[PassengerGroup]] = {s: [] for s in model.stations}
        self.generated = 0
        self.arrived = 0

    # -- arrivals ------------------------------------------------------------

    def generate_arrivals(self, t: int) -> int:
        """Advance demand one second; returns persons generated this second."""
        if not self.pairs:
            return 0
        idx = bisect_right(self._marks, t) - 1
        if idx != self._cached_idx:
            self._cached_idx = idx
            self._cached_rates = np.array(
                [self.od.rate(o, d, t) for o, d in self.pairs])
        rates = self._cached_rates
        if self.stochastic:
            counts = self.rng.poisson(rates)
        else:
            self._acc += rates
            # tolerance absorbs binary drift of decimal rates (10 x 0.3 is 3)
            counts = np.floor(self._acc + 1e-9).astype(int)
            self._acc -= counts
        total = 0
        for i in np.nonzero(counts)[0]:
            o, d = self.pairs[i]
            g = PassengerGroup(count=int(counts[i]), origin=o, destination=d, created_at=t)
            total += g.count
            self._admit(g, t)
        self.generated += total
        return total

    def _admit(self, group: PassengerGroup, t: int) -> None:
        station = self.model.stations[group.origin]
        if self.station_waiting(group.origin) + group.count <= station.capacity:
            d = self.pair_dir[(group.origin, group.destination)]
            self.queues[(group.origin, d)].append(group)
        else:
            self.outside[group.origin].append(group)

    def admit_from_outside(self, station_id: str) -> None:
        """Outside pool enters FIFO while the station has room."""
        station = self.model.stations[station_id]
        pool = self.outside[station_id]
        while pool:
            g = pool[0]
            room = station.capacity - self.station_waiting(station_id)
            if room <= 0:
                break
            take = min(room, g.count)
            d = self.pair_dir[(g.origin, g.destination)]
            if take == g.count:
                pool.pop(0)
                self.queues[(station_id, d)].append(g)
            else:
                moved = PassengerGroup(take, g.origin, g.destination, g.created_at)
                g.count -= take
                self.queues[(station_id, d)].append(moved)

    # -- queries -------------------------------------------------------------

    def station_waiting(self, station_id: str) -> int:
        return sum(g.count for d in DIRECTIONS for g in self.queues[(station_id, d)])

    def waiting_total(self) -> int:
        inside = sum(self.station_waiting(s) for s in self.model.stations)
        out = sum(g.count for pool in self.outside.values() for g in pool)
        return inside + out

    def onboard_total(self, trains) -> int:
        return sum(t.onboard_count() for t in trains)

    def conservation_error(self, trains) -> int:
        return self.generated - (self.waiting_total()
                                 + self.onboard_total(trains) + self.arrived)

    # -- exchange ------------------------------------------------------------

    def exchange_at_platform(self, train, station_id: str) -> Tuple[int, int]:
        """Alight then board at ``station_id``; returns (alighted, boarded).

        Alighting groups with this destination count as arrived.  Boarding is
        FIFO by creation time over the queue in the train's direction,
        restricted to groups whose destination lies ahead, splitting the group
        at the capacity boundary.
        """
        alighted = self._alight(train, station_id, rejoin=False)
        boarded = 0
        queue = self.queues[(station_id, train.direction)]
        keep: List[PassengerGroup] = []
        for g in sorted(queue, key=lambda g: (g.created_at,)):
            room = train.capacity - train.onboard_count()
            ahead = self.model.serves_direction(station_id, g.destination, train.direction)
            if not ahead or room <= 0:
                keep.append(g)
                continue
            take = min(room, g.count)
            if take == g.count:
                train.onboard.append(g)
            else:
                train.onboard.append(PassengerGroup(take, g.origin, g.destination, g.created_at))
                g.count -= take
                keep.append(g)
            boarded += take
        queue[:] = keep
        self.admit_from_outside(station_id)
        return alighted, boarded

    def rebalance_after_reversal(self, train, station_id: str) -> int:
        """After a turnback, groups whose destination is no longer ahead leave
        the train and rejoin the platform queue (keeping their creation time).
        Returns the number of persons off-loaded."""
        return self._alight(train, station_id, rejoin=True, only_wrong_way=True)

    def evacuate(self, train, station_id: str) -> int:
        """Empty the train at ``station_id``: a withdrawn train takes no one
        along.  Arrivals stay arrived, everyone else rejoins the station
        queues with their original creation time.  Returns persons moved."""
        moved = 0
        for g in train.onboard:
            moved += g.count
            if g.destination == station_id:
                self.arrived += g.count
                continue
            d = self.model.travel_direction(station_id, g.destination)
            if d is not None:
                self.queues[(station_id, d)].append(
                    PassengerGroup(g.count, station_id, g.destination, g.created_at))
            else:
                self.arrived += g.count
        train.onboard[:] = []
        return moved

    def _alight(self, train, station_id: str, rejoin: bool,
                only_wrong_way: bool = False) -> int:
        moved = 0
        keep = []
        for g in train.onboard:
            if only_wrong_way:
                drop = (g.destination != station_id and not self.model.serves_direction(
                    station_id, g.destination, train.direction))
            else:
                drop = g.destination == station_id
            if not drop:
                keep.append(g)
                continue
            moved += g.count
            if rejoin and g.destination != station_id:
                d = self.model.travel_direction(station_id, g.destination)
                if d is not None:
                    self.queues[(station_id, d)].append(
                        PassengerGroup(g.count, station_id, g.destination, g.created_at))
                else:
                    self.arrived += g.count  # nowhere to go; leave the system
            else:
                self.arrived += g.count
        train.onboard[:] = keep
        return moved

    def congestion_excess(self, trains) -> float:
        """Mean excess load factor over running trains (0 when all fit)."""
        running = [t for t in trains if not t.absorbed]
        if not running:
            return 0.0
        return float(np.mean([max(0.0, t.load_factor() - 1.0) for t in running]))
