"""Planned service: timetable records, operation-rule extraction from them,
and planned train trajectories for schedule-deviation measurement.

The operating principle: the plan is not consulted by the simulator at all.
It is compiled into a time-ordered list of signal/route commands, and the
timetable agent fires them at their scheduled seconds, retrying denied route
requests each second.  Whatever train is standing at the signal departs.
"""
from __future__ import annotations

import csv
import io
import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .params import SimParams
from .route_model import RouteModel, opposite
from .sim_core import RequestRoute, SetSignal

POST_PROCEED = "proceed"
POST_TURN_BACK = "turn_back"
POST_TO_DEPOT = "to_depot"
POST_ACTIONS = (POST_PROCEED, POST_TURN_BACK, POST_TO_DEPOT)


def hms_to_s(hms: str) -> int:
    h, m, s = hms.split(":")
    return int(h) * 3600 + int(m) * 60 + int(s)


def s_to_hms(t: int) -> str:
    return f"{t // 3600:02d}:{t % 3600 // 60:02d}:{t % 60:02d}"


@dataclass
class TimetableEntry:
    train: str
    station: str
    arrive_s: int
    depart_s: int
    platform: str
    post_action: str = POST_PROCEED

    def __post_init__(self):
        if self.depart_s < self.arrive_s:
            raise ValueError(f"{self.train}@{self.station}: depart before arrive")
        if self.post_action not in POST_ACTIONS:
            raise ValueError(f"unknown post_action {self.post_action}")


class Timetable:
    def __init__(self, entries: List[TimetableEntry]):
        self.entries = sorted(entries, key=lambda e: (e.train, e.arrive_s))
        self.by_train: Dict[str, List[TimetableEntry]] = {}
        for e in self.entries:
            self.by_train.setdefault(e.train, []).append(e)
        for train, rows in self.by_train.items():
            for a, b in zip(rows, rows[1:]):
                if b.arrive_s < a.depart_s:
                    raise ValueError(f"{train}: entries overlap at {b.station}")

    def trains(self) -> List[str]:
        return sorted(self.by_train)

    def scheduled_arrivals(self, station: str, platform: str) -> List[TimetableEntry]:
        return sorted((e for e in self.entries
                       if e.station == station and e.platform == platform),
                      key=lambda e: e.arrive_s)


def parse_timetable_csv(text: str) -> Timetable:
    entries = []
    for row in csv.DictReader(io.StringIO(text)):
        entries.append(TimetableEntry(
            train=row["train"], station=row["station"],
            arrive_s=hms_to_s(row["arrive_hms"]), depart_s=hms_to_s(row["depart_hms"]),
            platform=row["platform"],
            post_action=row.get("post_action") or POST_PROCEED))
    return Timetable(entries)


def load_timetable(path: str) -> Timetable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_timetable_csv(fh.read())


def serialize_timetable_csv(tt: Timetable) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["train", "station", "arrive_hms", "depart_hms", "platform", "post_action"])
    for e in tt.entries:
        w.writerow([e.train, e.station, s_to_hms(e.arrive_s), s_to_hms(e.depart_s),
                    e.platform, e.post_action])
    return out.getvalue()


# -- directions along the plan ----------------------------------------------


def arrival_direction(model: RouteModel, rows: List[TimetableEntry], idx: int) -> str:
    """Direction the train was travelling when it reached entry ``idx``."""
    pos = model.station_pos
    j = idx
    while j > 0 and rows[j - 1].station == rows[j].station:
        j -= 1
    if j > 0:
        return "up" if pos[rows[j].station] > pos[rows[j - 1].station] else "down"
    if idx + 1 < len(rows) and rows[idx + 1].station != rows[idx].station:
        return "up" if pos[rows[idx + 1].station] > pos[rows[idx].station] else "down"
    return "up"


def departure_direction(model: RouteModel, rows: List[TimetableEntry], idx: int) -> str:
    """Direction the train leaves entry ``idx`` in: toward the next scheduled
    station, or opposite the arrival heading after a turnback or when pulling
    back to the depot road."""
    pos = model.station_pos
    entry = rows[idx]
    if idx + 1 < len(rows) and rows[idx + 1].station != entry.station:
        nxt = rows[idx + 1]
        return "up" if pos[nxt.station] > pos[entry.station] else "down"
    if entry.post_action in (POST_TURN_BACK, POST_TO_DEPOT):
        return opposite(arrival_direction(model, rows, idx))
    return arrival_direction(model, rows, idx)


# -- operation rules ---------------------------------------------------------


@dataclass
class TimedCommand:
    t: int
    command: object


def _route_for_departure(model: RouteModel, from_block: str, successors: List[str],
                         post_action: str) -> Optional[Tuple[str, str]]:
    """Junction route to request when leaving a platform, if any.

    A depot move wants the route whose path leaves the running line (first
    block not a platform); every other departure takes the platform-to-
    platform route.
    """
    candidates: List[Tuple[str, str, bool]] = []
    for n in successors:
        for jid, rid in model.entry_routes(n):
            if model.junctions[jid].route(rid).approach == from_block:
                candidates.append((jid, rid, model.blocks[n].platform))
    if not candidates:
        return None
    want_platform = post_action != POST_TO_DEPOT
    for jid, rid, is_platform in candidates:
        if is_platform == want_platform:
            return (jid, rid)
    jid, rid, _ = candidates[0]
    return (jid, rid)


def extract_operation_rules(model: RouteModel, tt: Timetable,
                            params: Optional[SimParams] = None) -> List[TimedCommand]:
    """Compile the timetable into timed signal/route commands.

    Per entry: if the departure path crosses into a junction route, request it
    ``route_lead_s`` before departure; at the departure second, set the
    platform's departure signal for the departure direction to proceed.
    """
    params = params or SimParams()
    out: List[TimedCommand] = []
    for train, rows in tt.by_train.items():
        for idx, entry in enumerate(rows):
            station = model.stations[entry.station]
            plat = next((p for p in station.platforms if p.id == entry.platform), None)
            if plat is None:
                raise ValueError(f"{entry.train}@{entry.station}: unknown platform {entry.platform}")
            d = departure_direction(model, rows, idx)
            block = model.blocks[plat.block]
            if not block.succ(d):
                continue  # nothing beyond; nothing to command
            choice = _route_for_departure(model, plat.block, block.succ(d), entry.post_action)
            if choice is not None:
                out.append(TimedCommand(max(0, entry.depart_s - params.route_lead_s),
                                        RequestRoute(*choice)))
            dep = model.departure_point(plat.block, d)
            if dep is not None:
                out.append(TimedCommand(entry.depart_s, SetSignal(dep.id, "proceed")))
    out.sort(key=lambda tc: (tc.t, isinstance(tc.command, SetSignal)))
    return out


# -- planned trajectories ----------------------------------------------------


class PlannedProfile:
    """Planned line position of each train over time.

    Between scheduled stops the position follows an accelerate/cruise/brake
    shape stretched to the scheduled running time; same-station turnback
    shunts interpolate linearly; dwells hold the stopping point.
    """

    def __init__(self, model: RouteModel, tt: Timetable, params: Optional[SimParams] = None):
        self.model = model
        self.tt = tt
        self.params = params or SimParams()
        self._segments: Dict[str, Tuple[List[int], List[tuple]]] = {}
        self._block_maps: Dict[str, List[tuple]] = {}
        self._windows: Dict[str, Tuple[int, int]] = {}
        for train, rows in tt.by_train.items():
            stop_pos = [self._stop_pos(rows, i) for i in range(len(rows))]
            times: List[int] = []
            segs: List[tuple] = []
            maps: List[tuple] = []
            for i, e in enumerate(rows):
                p0 = stop_pos[i]
                blk0 = self._platform_block(e)
                times.append(e.arrive_s)
                segs.append(("dwell", p0, p0, e.arrive_s, e.depart_s))
                maps.append(("dwell", blk0))
                if i + 1 < len(rows):
                    nxt = rows[i + 1]
                    p1 = stop_pos[i + 1]
                    blk1 = self._platform_block(nxt)
                    times.append(e.depart_s)
                    if nxt.station == e.station:
                        segs.append(("shunt", p0, p1, e.depart_s, nxt.arrive_s))
                        maps.append(("shunt", (blk0, blk1)))
                    else:
                        segs.append(("run", p0, p1, e.depart_s, nxt.arrive_s))
                        d = departure_direction(model, rows, i)
                        maps.append(("run", self._run_path(blk0, blk1, d)))
            self._segments[train] = (times, segs)
            self._block_maps[train] = maps
            self._windows[train] = (rows[0].arrive_s, rows[-1].depart_s)

    def _platform_block(self, entry: TimetableEntry) -> str:
        station = self.model.stations[entry.station]
        return next(p for p in station.platforms if p.id == entry.platform).block

    def _run_path(self, from_block: str, to_block: str,
                  direction: str) -> Tuple[List[str], List[float]]:
        """Block chain of a stop-to-stop run and cumulative metres past the
        departure block's far end at each chain block's far end."""
        path = [from_block]
        cum = [0.0]
        cur = from_block
        while cur != to_block:
            step = None
            for s in self.model.blocks[cur].succ(direction):
                if s == to_block or self.model.reach_blocks(s, direction, [to_block]) is not None:
                    step = s
                    break
            if step is None or len(path) > len(self.model.blocks):
                raise ValueError(f"no {direction} path {from_block} -> {to_block}")
            path.append(step)
            cum.append(cum[-1] + self.model.blocks[step].length_m)
            cur = step
        return path, cum

    def _stop_pos(self, rows: List[TimetableEntry], idx: int) -> float:
        entry = rows[idx]
        station = self.model.stations[entry.station]
        plat = next(p for p in station.platforms if p.id == entry.platform)
        arr = arrival_direction(self.model, rows, idx)
        return self.model.stop_position(plat.block, arr)

    def position(self, train: str, t: float) -> Optional[float]:
        entry = self._segments.get(train)
        if entry is None:
            return None
        times, segs = entry
        if not segs:
            return None
        first = segs[0]
        if t <= first[3]:
            return first[1]
        i = bisect_right(times, t) - 1
        i = max(0, min(i, len(segs) - 1))
        kind, p0, p1, t0, t1 = segs[i]
        if t >= t1 or t1 == t0:
            return p1
        if kind == "dwell":
            return p0
        frac_t = t - t0
        dur = t1 - t0
        dist = p1 - p0
        if kind == "shunt":
            return p0 + dist * frac_t / dur
        return p0 + math.copysign(self._run_distance(abs(dist), dur, frac_t), dist)

    def service_window(self, train: str) -> Optional[Tuple[int, int]]:
        """(first scheduled arrival, last scheduled departure); the train is
        planned to be on the line inside this window and absent outside it."""
        return self._windows.get(train)

    def block_at(self, train: str, t: float) -> Optional[str]:
        """Block the plan puts ``train`` in at clock ``t``; None outside the
        train's service window.

        Runs map the profile position onto the run's block chain; a reversal
        shunt splits its interval across the two platform blocks in proportion
        to their lengths (the plan has no finer record of the move).
        """
        window = self._windows.get(train)
        if window is None or not (window[0] <= t <= window[1]):
            return None
        times, segs = self._segments[train]
        maps = self._block_maps[train]
        i = bisect_right(times, t) - 1
        i = max(0, min(i, len(segs) - 1))
        kind, data = maps[i]
        if kind == "dwell":
            return data
        _, p0, p1, t0, t1 = segs[i]
        if kind == "shunt":
            a, b = data
            la = self.model.blocks[a].length_m
            lb = self.model.blocks[b].length_m
            return a if (t - t0) < (t1 - t0) * la / (la + lb) else b
        path, cum = data
        dist = abs(self.position(train, t) - p0)
        for k in range(len(path) - 1, 0, -1):
            if dist > cum[k - 1] + 1e-9:
                return path[k]
        return path[0]

    def _run_distance(self, D: float, T: float, tau: float) -> float:
        """Distance covered after ``tau`` seconds of a stop-to-stop run of
        length D scheduled over T seconds, with ramp rates a and b."""
        a, b = self.params.accel_mps2, self.params.brake_mps2
        k = 0.5 / a + 0.5 / b
        disc = T * T - 4.0 * k * D
        if disc <= 0:
            return min(D, D / T * tau)  # schedule tighter than physics; flat profile
        v = (T - math.sqrt(disc)) / (2.0 * k)
        t_acc = v / a
        t_brk = v / b
        t_cru = T - t_acc - t_brk
        if tau <= t_acc:
            return 0.5 * a * tau * tau
        d = 0.5 * a * t_acc * t_acc
        if tau <= t_acc + t_cru:
            return d + v * (tau - t_acc)
        d += v * t_cru
        rem = tau - t_acc - t_cru
        return min(D, d + v * rem - 0.5 * b * rem * rem)
