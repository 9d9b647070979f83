"""Control agents.

Three cooperating pieces drive a run:

* ``TimetableAgent`` replays compiled operation rules at their scheduled
  seconds and retries denied route requests every following second.
* ``RuleBasedExecutor`` operates a set of stations directly, one latched
  macro action per decision point, translating "proceed after +30 s" or
  "turn back here" into the signal and route commands that realize it.
* ``assign_control`` splits the line between the two when a track blockage
  is present: stations inside the widened disruption span move to the
  executor, the rest stay on the timetable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .params import SimParams
from .route_model import DOWN, UP, RouteModel, opposite
from .sim_core import (
    EVENT_REJECT,
    RequestRoute,
    SetSignal,
    SimState,
    TrainPhase,
)
from .timetable import TimedCommand

DWELL_BUCKETS = (0, 30, 60, 120)
ACTION_PROCEED = 0
ACTION_TURN_BACK = 1


@dataclass(frozen=True)
class MacroPoint:
    """A (station, arrival direction) pair where turning back is possible."""
    station: str
    direction: str
    platform_block: str
    junction: str
    route: str

    @property
    def key(self) -> str:
        return f"{self.station}:{self.direction}"


@dataclass
class ControlAssignment:
    stations: List[str]
    macro_points: List[MacroPoint]
    suppressed_points: Set[str] = field(default_factory=set)
    suppressed_junctions: Set[str] = field(default_factory=set)

    @property
    def controlled(self) -> bool:
        return bool(self.stations)


def macro_points_for(model: RouteModel, stations: Sequence[str]) -> List[MacroPoint]:
    """Turnback-capable (station, arrival direction) pairs among ``stations``,
    in line order, up before down."""
    points: List[MacroPoint] = []
    for sid in stations:
        for d in (UP, DOWN):
            plat = model.arrival_platform(sid, d)
            if plat is None:
                continue
            tb = model.turnback_route_from(plat.block, d)
            if tb is not None:
                points.append(MacroPoint(sid, d, plat.block, tb[0], tb[1]))
    return points


def all_macro_points(model: RouteModel) -> List[MacroPoint]:
    """Every decision point the line offers, regardless of any assignment."""
    return macro_points_for(model, [s.id for s in model.ordered_stations()])


def assign_control(model: RouteModel, disruptions: Sequence) -> ControlAssignment:
    """Decide which stations the rule-based executor takes over.

    The affected span is the union of the disrupted blocks' line extents,
    stretched outward to the nearest turnback-capable station on each side,
    then once more to the next turnback or depot station beyond so reversed
    trains have somewhere to turn again.  No disruption means no takeover.
    """
    blocks = {b for d in disruptions for b in d.blocks}
    if not blocks:
        return ControlAssignment([], [])
    lo = min(model.block_span[b][0] for b in blocks)
    hi = max(model.block_span[b][1] for b in blocks)
    order = [s.id for s in model.ordered_stations()]
    pos = model.station_pos

    def can_turn(sid: str) -> bool:
        st = model.stations[sid]
        return st.can_turn_back or st.has_depot

    west = next((s for s in reversed(order) if pos[s] <= lo and can_turn(s)), order[0])
    east = next((s for s in order if pos[s] >= hi and can_turn(s)), order[-1])
    west_end = next((s for s in reversed(order) if pos[s] < pos[west] and can_turn(s)), west)
    east_end = next((s for s in order if pos[s] > pos[east] and can_turn(s)), east)

    stations = [s for s in order if pos[west_end] <= pos[s] <= pos[east_end]]
    points = macro_points_for(model, stations)

    sup_points: Set[str] = set()
    sup_junctions: Set[str] = set()
    for sid in stations:
        for plat in model.stations[sid].platforms:
            for d in (UP, DOWN):
                cp = model.departure_point(plat.block, d)
                if cp is not None:
                    sup_points.add(cp.id)
                for n in model.blocks[plat.block].succ(d):
                    for jid, rid in model.entry_routes(n):
                        if model.junctions[jid].route(rid).approach == plat.block:
                            sup_junctions.add(jid)
    return ControlAssignment(stations, points, sup_points, sup_junctions)


class TimetableAgent:
    """Fires compiled operation rules on schedule.

    Route requests that come back denied stay pending and are re-issued every
    second until the interlocking grants them.  Rules touching control points
    handed to the rule-based executor are dropped.
    """

    def __init__(self, rules: Sequence[TimedCommand],
                 assignment: Optional[ControlAssignment] = None):
        self.rules = sorted(rules, key=lambda tc: tc.t)
        self.assignment = assignment
        self._ptr: Optional[int] = None
        self._pending: Dict[Tuple[str, str], RequestRoute] = {}

    def _suppressed(self, cmd) -> bool:
        a = self.assignment
        if a is None:
            return False
        if isinstance(cmd, SetSignal):
            return cmd.point in a.suppressed_points
        if isinstance(cmd, RequestRoute):
            return cmd.junction in a.suppressed_junctions
        return False

    def commands(self, state: SimState) -> List[object]:
        due = state.clock + 1
        if self._ptr is None:
            self._ptr = 0
            while self._ptr < len(self.rules) and self.rules[self._ptr].t <= state.clock:
                self._ptr += 1
        out: List[object] = []
        for key in list(self._pending):
            jid, rid = key
            lock = state.route_locks.get(jid)
            if lock is not None and lock.route == rid:
                del self._pending[key]
        while self._ptr < len(self.rules) and self.rules[self._ptr].t <= due:
            cmd = self.rules[self._ptr].command
            self._ptr += 1
            if self._suppressed(cmd):
                continue
            if isinstance(cmd, RequestRoute):
                self._pending[(cmd.junction, cmd.route)] = cmd
            else:
                out.append(cmd)
        out.extend(self._pending.values())
        return out


@dataclass
class MacroAction:
    post: int = ACTION_PROCEED
    extra_dwell_s: int = 0


@dataclass
class _Visit:
    station: str
    direction: str
    block: str
    action: MacroAction
    release_t: int
    turn: Optional[Tuple[str, str]]  # (junction, route) when turning back
    signal_done: bool = False
    turned: bool = False


class RuleBasedExecutor:
    """Per-train micro control at the stations it owns.

    A train arriving at an owned platform opens a visit; the latched macro
    action for that (station, direction) point decides what happens once the
    base dwell plus the action's extra dwell has elapsed.  A turn-back at a
    point with no turnback route is logged and downgraded to proceed.
    """

    def __init__(self, model: RouteModel, assignment: ControlAssignment,
                 params: Optional[SimParams] = None):
        self.model = model
        self.assignment = assignment
        self.params = params or SimParams()
        self.actions: Dict[str, MacroAction] = {}
        self.refusals = 0
        self._visits: Dict[str, _Visit] = {}
        self._owned: Dict[Tuple[str, str], Tuple[str, str]] = {}
        for sid in assignment.stations:
            for d in (UP, DOWN):
                plat = model.arrival_platform(sid, d)
                if plat is not None:
                    self._owned[(plat.block, d)] = (sid, d)
        self._turn_routes = {p.key: (p.junction, p.route) for p in assignment.macro_points}

    def set_actions(self, actions: Dict[str, MacroAction]) -> None:
        self.actions = dict(actions)

    def _open_visit(self, state: SimState, train, sid: str, d: str) -> _Visit:
        key = f"{sid}:{d}"
        action = self.actions.get(key, MacroAction())
        wants_turn = action.post == ACTION_TURN_BACK
        if not wants_turn and not self.model.blocks[train.head_block].succ(d):
            wants_turn = True  # dead-end platform: the only way onward is back
        turn = None
        if wants_turn:
            turn = self._turn_routes.get(key)
            if turn is None and action.post == ACTION_TURN_BACK:
                self.refusals += 1
                state.emit(kind=EVENT_REJECT, train=train.id, station=sid,
                           detail="turnback_unavailable")
                action = MacroAction(ACTION_PROCEED, action.extra_dwell_s)
        base_left = train.phase_remaining if train.phase == TrainPhase.DWELLING else 0
        return _Visit(sid, d, train.head_block, action,
                      state.clock + base_left + action.extra_dwell_s, turn)

    def commands(self, state: SimState) -> List[object]:
        due = state.clock + 1
        out: List[object] = []
        for tid in list(self._visits):
            train = state.trains.get(tid)
            if train is None or train.absorbed or train.phase == TrainPhase.RUNNING \
                    or train.head_block != self._visits[tid].block:
                del self._visits[tid]
        for train in state.running_trains():
            if train.id in self._visits:
                continue
            if train.phase not in (TrainPhase.DWELLING, TrainPhase.HELD):
                continue
            owner = self._owned.get((train.head_block, train.direction))
            if owner is not None:
                self._visits[train.id] = self._open_visit(state, train, *owner)
        for tid, visit in self._visits.items():
            train = state.trains[tid]
            if visit.turn is not None:
                out.extend(self._drive_turnback(state, train, visit, due))
            else:
                out.extend(self._drive_proceed(state, train, visit, due))
        return out

    def _drive_turnback(self, state: SimState, train, visit: _Visit, due: int) -> List[object]:
        if train.direction != visit.direction:
            visit.turned = True
        if visit.turned:
            return []
        if due < visit.release_t:
            return []
        jid, rid = visit.turn
        out: List[object] = []
        lock = state.route_locks.get(jid)
        if lock is None or lock.route != rid:
            out.append(RequestRoute(jid, rid))
        dep = self.model.departure_point(visit.block, opposite(visit.direction))
        if dep is not None and not visit.signal_done:
            out.append(SetSignal(dep.id, "proceed"))
            visit.signal_done = True
        return out

    def _drive_proceed(self, state: SimState, train, visit: _Visit, due: int) -> List[object]:
        out: List[object] = []
        block = self.model.blocks[visit.block]
        for n in block.succ(visit.direction):
            for jid, rid in self.model.entry_routes(n):
                if self.model.junctions[jid].route(rid).approach != visit.block:
                    continue
                if due >= visit.release_t - self.params.route_lead_s:
                    lock = state.route_locks.get(jid)
                    if lock is None or lock.route != rid:
                        out.append(RequestRoute(jid, rid))
                break
        if due >= visit.release_t and not visit.signal_done:
            dep = self.model.departure_point(visit.block, visit.direction)
            if dep is not None:
                out.append(SetSignal(dep.id, "proceed"))
            visit.signal_done = True
        return out
