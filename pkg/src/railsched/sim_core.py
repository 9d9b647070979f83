"""Deterministic 1 s-step traffic engine: block occupancy, interlocking,
movement authority, braking-curve kinematics, dwell/turnback state machine.

Safety rests on two rules.  A train's displacement in a step never exceeds the
movement authority computed from the state at the start of that step, and
authority never extends into an occupied, disrupted or signal-protected block.
Everything else (who opens which signal when) is the agents' problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .params import SimParams
from .route_model import (DEPARTURE, DOWN, JUNCTION, UP, RouteModel, opposite)

STOP = "stop"
PROCEED = "proceed"
ASPECTS = (STOP, PROCEED)

EVENT_ARRIVE = "arrive"
EVENT_DEPART = "depart"
EVENT_STOP_BEGIN = "stop_between_stations_begin"
EVENT_STOP_END = "stop_between_stations_end"
EVENT_LOCK = "lock"
EVENT_RELEASE = "release"
EVENT_REJECT = "reject"
EVENT_REVERSE = "reverse"
EVENT_DISRUPTION_BEGIN = "disruption_begin"
EVENT_DISRUPTION_END = "disruption_end"
EVENT_ABSORBED = "absorbed"

_EPS = 1e-9


class SimError(Exception):
    pass


class UnknownControlPoint(SimError):
    pass


class ProceedWithoutLock(SimError):
    pass


class TrainPhase(str, Enum):
    RUNNING = "running"
    DWELLING = "dwelling"
    HELD = "held"
    REVERSED_PENDING = "reversed_pending"


@dataclass
class Disruption:
    blocks: Set[str]
    start_s: int
    duration_s: int

    def __post_init__(self):
        if self.start_s < 0 or self.duration_s <= 0:
            raise ValueError("disruption needs start_s >= 0 and duration_s > 0")
        self.blocks = set(self.blocks)

    def active(self, clock: int) -> bool:
        return self.start_s <= clock < self.start_s + self.duration_s


@dataclass
class TrainState:
    id: str
    head_block: str
    head_offset: float              # metres past the block entry, in travel direction
    direction: str
    length_m: float
    capacity: int
    velocity: float = 0.0
    phase: TrainPhase = TrainPhase.RUNNING
    phase_remaining: int = 0
    trail: List[str] = field(default_factory=list)   # occupied blocks, tail first
    onboard: list = field(default_factory=list)      # passenger groups
    in_interstation_stop: bool = False
    absorbed: bool = False

    def onboard_count(self) -> int:
        return sum(g.count for g in self.onboard)

    def load_factor(self) -> float:
        return self.onboard_count() / self.capacity if self.capacity else 0.0


@dataclass
class Placement:
    train: str
    block: str
    offset: float
    direction: str
    length_m: float = 150.0
    capacity: int = 600
    velocity: float = 0.0
    phase: TrainPhase = TrainPhase.HELD
    phase_remaining: int = 0


# -- micro commands ----------------------------------------------------------


@dataclass(frozen=True)
class SetSignal:
    point: str
    aspect: str


@dataclass(frozen=True)
class RequestRoute:
    junction: str
    route: str


@dataclass(frozen=True)
class ReleaseRoute:
    junction: str
    route: str


Command = object


@dataclass
class RouteDecision:
    granted: bool
    reason: Optional[str] = None


@dataclass
class _LockInfo:
    route: str
    entered: bool = False


class SimState:
    """Complete mutable world state; everything the step function touches."""

    def __init__(self, model: RouteModel, params: SimParams):
        self.model = model
        self.params = params
        self.clock: int = 0
        self.trains: Dict[str, TrainState] = {}
        self.signal_aspects: Dict[str, str] = {
            cp.id: STOP for cp in model.enumerate_control_points()}
        self.route_locks: Dict[str, Optional[_LockInfo]] = {
            j: None for j in model.junctions}
        self.occupancy: Dict[str, str] = {}     # block -> train id
        self.disruptions: List[Disruption] = []
        self._disruption_on: Set[int] = set()
        self.log: List[dict] = []

    # -- bookkeeping ---------------------------------------------------------

    def running_trains(self) -> List[TrainState]:
        return [t for t in self.trains.values() if not t.absorbed]

    def active_disrupted_blocks(self) -> Set[str]:
        out: Set[str] = set()
        for d in self.disruptions:
            if d.active(self.clock):
                out |= d.blocks
        return out

    def locked_route_blocks(self) -> Dict[str, Tuple[str, str]]:
        """block -> (junction, route) for every block inside a locked route."""
        out: Dict[str, Tuple[str, str]] = {}
        for jid, info in self.route_locks.items():
            if info is None:
                continue
            for b in self.model.junctions[jid].route(info.route).blocks:
                out[b] = (jid, info.route)
        return out

    def emit(self, kind: str, train: Optional[str] = None, station: Optional[str] = None,
             block: Optional[str] = None, detail: str = "") -> dict:
        ev = {"t": self.clock, "kind": kind, "train": train,
              "station": station, "block": block, "detail": detail}
        self.log.append(ev)
        return ev


def init_sim(model: RouteModel, placements: Sequence[Placement], params: Optional[SimParams] = None,
             signals: Optional[Dict[str, str]] = None,
             locks: Optional[Dict[str, Tuple[str, bool]]] = None,
             clock: int = 0) -> SimState:
    """Build a SimState with trains placed fully inside single blocks.

    ``signals``/``locks`` restore control state for mid-plan starts: aspects by
    control point id, and junction -> (route, entered) for held locks.
    """
    state = SimState(model, params or SimParams())
    state.clock = clock
    for p in placements:
        if p.block not in model.blocks:
            raise SimError(f"placement of {p.train} on unknown block {p.block}")
        blk = model.blocks[p.block]
        if not (p.length_m - 1e-6 <= p.offset <= blk.length_m + 1e-6):
            raise SimError(
                f"placement of {p.train} not fully inside {p.block} "
                f"(offset {p.offset}, length {p.length_m}, block {blk.length_m})")
        if p.block in state.occupancy:
            raise SimError(f"placement overlap on block {p.block}")
        if p.train in state.trains:
            raise SimError(f"duplicate train id {p.train}")
        offset = min(max(float(p.offset), p.length_m), blk.length_m)
        t = TrainState(id=p.train, head_block=p.block, head_offset=offset,
                       direction=p.direction, length_m=float(p.length_m),
                       capacity=int(p.capacity), velocity=float(p.velocity),
                       phase=p.phase, phase_remaining=int(p.phase_remaining),
                       trail=[p.block])
        state.trains[t.id] = t
        state.occupancy[p.block] = t.id
    for cp_id, aspect in (signals or {}).items():
        if cp_id not in state.signal_aspects:
            raise UnknownControlPoint(cp_id)
        state.signal_aspects[cp_id] = aspect
    for jid, (rid, entered) in (locks or {}).items():
        state.route_locks[jid] = _LockInfo(route=rid, entered=entered)
    return state


# -- interlocking operations -------------------------------------------------


def set_signal(state: SimState, point: str, aspect: str) -> None:
    """Set a control point aspect.  Idempotent.  Junction points refuse proceed
    unless their route currently holds the lock."""
    if point not in state.signal_aspects:
        raise UnknownControlPoint(point)
    if aspect not in ASPECTS:
        raise SimError(f"unknown aspect {aspect}")
    cp = state.model.control_points[point]
    if aspect == PROCEED and cp.kind == JUNCTION:
        info = state.route_locks.get(cp.junction or "")
        if info is None or info.route != cp.route:
            raise ProceedWithoutLock(point)
    state.signal_aspects[point] = aspect


def request_route(state: SimState, junction: str, route: str) -> RouteDecision:
    """Grant iff no route of the junction is locked, all route blocks are free
    of trains and disruption.  A grant locks the route and clears its entry
    signal; release re-closes it."""
    if junction not in state.model.junctions:
        return RouteDecision(False, f"unknown junction {junction}")
    try:
        r = state.model.junctions[junction].route(route)
    except KeyError:
        return RouteDecision(False, f"unknown route {route}")
    info = state.route_locks[junction]
    if info is not None:
        if info.route == route:
            return RouteDecision(True)
        return RouteDecision(False, "conflict")
    disrupted = state.active_disrupted_blocks()
    for b in r.blocks:
        if b in state.occupancy:
            return RouteDecision(False, f"occupied:{b}")
        if b in disrupted:
            return RouteDecision(False, f"disrupted:{b}")
    state.route_locks[junction] = _LockInfo(route=route)
    state.signal_aspects[r.entry_signal] = PROCEED
    state.emit(EVENT_LOCK, block=r.blocks[0], detail=f"{junction}/{route}")
    return RouteDecision(True)


def release_route(state: SimState, junction: str, route: str) -> bool:
    """Explicit release of a not-yet-cleared route (cancellation).  Refused if
    a train is standing inside the route."""
    info = state.route_locks.get(junction)
    if info is None or info.route != route:
        return False
    r = state.model.junctions[junction].route(route)
    if any(b in state.occupancy for b in r.blocks):
        return False
    _do_release(state, junction, route)
    return True


def _do_release(state: SimState, junction: str, route: str) -> None:
    r = state.model.junctions[junction].route(route)
    state.route_locks[junction] = None
    state.signal_aspects[r.entry_signal] = STOP
    state.emit(EVENT_RELEASE, block=r.blocks[0] if r.blocks else None,
               detail=f"{junction}/{route}")


# -- movement authority ------------------------------------------------------


def _crossing_allowed(state: SimState, b: str, n: str, direction: str,
                      disrupted: Set[str], locked_blocks: Dict[str, Tuple[str, str]],
                      along_route: Optional[Tuple[str, str]]) -> bool:
    model = state.model
    if n in state.occupancy:
        return False
    if n in disrupted:
        return False
    dep = model.departure_point(b, direction)
    if dep is not None and state.signal_aspects[dep.id] != PROCEED:
        return False
    entry = [(jid, rid) for jid, rid in model.entry_routes(n)
             if model.junctions[jid].route(rid).approach == b]
    if entry:
        ok = False
        for jid, rid in entry:
            info = state.route_locks.get(jid)
            if info is not None and info.route == rid \
                    and state.signal_aspects[model.junctions[jid].route(rid).entry_signal] == PROCEED:
                ok = True
                break
        if not ok:
            return False
    elif n in locked_blocks and locked_blocks[n] != along_route:
        # part of someone else's locked route: reserved against side entry
        return False
    return True


def movement_authority(state: SimState, train: TrainState) -> Tuple[float, List[str]]:
    """Distance the head may advance, and the block path it will follow.

    Authority extends from the head through successor blocks that are
    unoccupied, undisrupted and whose protecting signal (platform departure
    or junction entry) shows proceed, capped at the lookahead horizon.
    """
    model = state.model
    horizon = state.params.lookahead_m
    disrupted = state.active_disrupted_blocks()
    locked_blocks = state.locked_route_blocks()
    b = train.head_block
    dist = model.blocks[b].length_m - train.head_offset
    path: List[str] = []
    current_route = locked_blocks.get(b)
    while dist < horizon:
        succ = model.blocks[b].succ(train.direction)
        if not succ:
            break
        n = None
        if len(succ) == 1:
            cand = succ[0]
            if _crossing_allowed(state, b, cand, train.direction, disrupted,
                                 locked_blocks, current_route):
                n = cand
        else:
            # fan-out: follow the locked, proceed-showing route
            for cand in succ:
                if _crossing_allowed(state, b, cand, train.direction, disrupted,
                                     locked_blocks, current_route):
                    n = cand
                    break
        if n is None:
            break
        path.append(n)
        dist += model.blocks[n].length_m
        current_route = locked_blocks.get(n)
        b = n
    return min(dist, horizon), path


def speed_targets(state: SimState, train: TrainState, path: List[str]) -> List[Tuple[float, float]]:
    """(distance to boundary, speed limit beyond it) for each path block."""
    model = state.model
    out: List[Tuple[float, float]] = []
    dist = model.blocks[train.head_block].length_m - train.head_offset
    for b in path:
        out.append((dist, model.blocks[b].vmax_mps))
        dist += model.blocks[b].length_m
    return out


# -- kinematics --------------------------------------------------------------


def _reachable_speed(v: float, remaining: float, floor: float, brake: float, dt: float) -> float:
    """Largest v' such that the trapezoidal step plus the braking distance from
    v' down to ``floor`` still fits inside ``remaining`` metres."""
    c = remaining - v * dt / 2.0
    if c <= 0:
        return floor
    h = brake * dt / 2.0
    return max(floor, -h + math.sqrt(h * h + floor * floor + 2.0 * brake * c))


def kinematic_step(train: TrainState, authority: float, vmax_local: float,
                   targets: Sequence[Tuple[float, float]], params: SimParams) -> Tuple[float, float]:
    """One second of motion under authority and speed-limit targets.

    Returns (new velocity, displacement).  Displacement is clamped so the
    train never passes the authority boundary, and the speed choice keeps the
    braking curve inside the remaining authority at all times.
    """
    dt = params.dt
    v = train.velocity
    cap = min(vmax_local, v + params.accel_mps2 * dt)
    cap = min(cap, _reachable_speed(v, authority, 0.0, params.brake_mps2, dt))
    for dist, limit in targets:
        if limit < cap:
            cap = min(cap, _reachable_speed(v, dist, limit, params.brake_mps2, dt))
    v_new = max(cap, v - params.brake_mps2 * dt, 0.0)
    v_new = min(v_new, vmax_local)  # never above the civil limit underfoot
    dx = min((v + v_new) / 2.0 * dt, authority)
    if authority - dx < _EPS:
        dx = authority
        if v_new < _EPS:
            v_new = 0.0
    return v_new, max(dx, 0.0)


# -- the step function -------------------------------------------------------


def step(state: SimState, commands: Sequence[Command],
         per_second_hook=None) -> List[dict]:
    """Advance the world one second.  Applies commands (invalid ones become
    rejection events), moves trains under snapshot authorities, then runs the
    dwell/turnback state machine.  Returns this second's events."""
    log_start = len(state.log)
    state.clock += 1
    _update_disruption_edges(state)
    _apply_commands(state, commands)
    _auto_reverse(state)
    snapshot = {}
    for t in state.running_trains():
        auth, path = movement_authority(state, t)
        snapshot[t.id] = (auth, path)
    for tid in sorted(snapshot):
        t = state.trains[tid]
        _advance_train(state, t, *snapshot[tid])
    _auto_release_routes(state)
    _phase_machine(state)
    if per_second_hook is not None:
        per_second_hook(state)
    return state.log[log_start:]


def _update_disruption_edges(state: SimState) -> None:
    for i, d in enumerate(state.disruptions):
        act = d.active(state.clock)
        if act and i not in state._disruption_on:
            state._disruption_on.add(i)
            state.emit(EVENT_DISRUPTION_BEGIN, detail=",".join(sorted(d.blocks)))
        elif not act and i in state._disruption_on:
            state._disruption_on.discard(i)
            state.emit(EVENT_DISRUPTION_END, detail=",".join(sorted(d.blocks)))


def _apply_commands(state: SimState, commands: Sequence[Command]) -> None:
    for cmd in commands:
        if isinstance(cmd, SetSignal):
            try:
                set_signal(state, cmd.point, cmd.aspect)
            except SimError as exc:
                state.emit(EVENT_REJECT, detail=f"set_signal {cmd.point}: {exc.__class__.__name__}")
        elif isinstance(cmd, RequestRoute):
            decision = request_route(state, cmd.junction, cmd.route)
            if not decision.granted:
                state.emit(EVENT_REJECT,
                           detail=f"request_route {cmd.junction}/{cmd.route}: {decision.reason}")
        elif isinstance(cmd, ReleaseRoute):
            if not release_route(state, cmd.junction, cmd.route):
                state.emit(EVENT_REJECT, detail=f"release_route {cmd.junction}/{cmd.route}")
        else:
            state.emit(EVENT_REJECT, detail=f"unknown command {cmd!r}")


def _auto_reverse(state: SimState) -> None:
    """Start a turnback for any standing train whose dwell is complete and
    which has a locked, cleared route leaving its platform the other way."""
    for t in state.running_trains():
        if t.phase is not TrainPhase.HELD or t.velocity > _EPS:
            continue
        if len(t.trail) != 1:
            continue
        back = opposite(t.direction)
        hit = None
        for n in state.model.blocks[t.head_block].succ(back):
            for jid, rid in state.model.entry_routes(n):
                route = state.model.junctions[jid].route(rid)
                if route.approach != t.head_block:
                    continue
                info = state.route_locks.get(jid)
                if info is None or info.route != rid:
                    continue
                if state.signal_aspects[route.entry_signal] == PROCEED:
                    hit = (jid, rid)
                    break
            if hit is not None:
                break
        if hit is None:
            continue
        blk = state.model.blocks[t.head_block]
        t.direction = opposite(t.direction)
        t.head_offset = blk.length_m - t.head_offset + t.length_m
        t.velocity = 0.0
        t.phase = TrainPhase.REVERSED_PENDING
        t.phase_remaining = state.params.reverse_s
        st = state.model.station_of_platform_block(t.head_block)
        state.emit(EVENT_REVERSE, train=t.id, block=t.head_block,
                   station=st[0] if st else None, detail=t.direction)


def _advance_train(state: SimState, t: TrainState, authority: float, path: List[str]) -> None:
    if t.phase is not TrainPhase.RUNNING:
        return
    model = state.model
    vmax_here = min(model.blocks[b].vmax_mps for b in t.trail)
    targets = speed_targets(state, t, path)
    v_new, dx = kinematic_step(t, authority, vmax_here, targets, state.params)
    t.velocity = v_new
    remaining = dx
    # push the head forward across block boundaries along the authorized path
    path_iter = iter(path)
    while remaining > _EPS:
        blk = model.blocks[t.head_block]
        room = blk.length_m - t.head_offset
        if remaining < room - _EPS:
            t.head_offset += remaining
            remaining = 0.0
        else:
            t.head_offset = blk.length_m
            remaining -= room
            try:
                nxt = next(path_iter)
            except StopIteration:
                break
            _cross_boundary(state, t, t.head_block, nxt)
            t.head_block = nxt
            t.head_offset = 0.0
    _trim_tail(state, t)
    _interstation_stop_bookkeeping(state, t)
    _absorb_if_depot_sink(state, t)


def _cross_boundary(state: SimState, t: TrainState, b: str, n: str) -> None:
    model = state.model
    if n in state.occupancy:
        raise SimError(f"occupancy violation: {t.id} entering {n} held by {state.occupancy[n]}")
    state.occupancy[n] = t.id
    t.trail.append(n)
    dep = model.departure_point(b, t.direction)
    if dep is not None and state.signal_aspects[dep.id] == PROCEED:
        state.signal_aspects[dep.id] = STOP      # passage puts it back to stop
    for jid, rid in model.entry_routes(n):
        route = model.junctions[jid].route(rid)
        if route.approach != b:
            continue
        info = state.route_locks.get(jid)
        if info is not None and info.route == rid:
            info.entered = True
            if state.signal_aspects[route.entry_signal] == PROCEED:
                state.signal_aspects[route.entry_signal] = STOP


def _trim_tail(state: SimState, t: TrainState) -> None:
    model = state.model
    while len(t.trail) > 1:
        behind = sum(model.blocks[b].length_m for b in t.trail[1:-1])
        behind += t.head_offset
        if behind >= t.length_m - _EPS:
            freed = t.trail.pop(0)
            if state.occupancy.get(freed) == t.id:
                del state.occupancy[freed]
        else:
            break


def _auto_release_routes(state: SimState) -> None:
    for jid, info in list(state.route_locks.items()):
        if info is None or not info.entered:
            continue
        r = state.model.junctions[jid].route(info.route)
        if all(b not in state.occupancy for b in r.blocks):
            _do_release(state, jid, info.route)


def _interstation_stop_bookkeeping(state: SimState, t: TrainState) -> None:
    stopped_between = (t.velocity < _EPS and t.phase is TrainPhase.RUNNING
                       and not state.model.blocks[t.head_block].platform)
    if stopped_between and not t.in_interstation_stop:
        t.in_interstation_stop = True
        state.emit(EVENT_STOP_BEGIN, train=t.id, block=t.head_block)
    elif t.in_interstation_stop and not stopped_between:
        t.in_interstation_stop = False
        state.emit(EVENT_STOP_END, train=t.id, block=t.head_block)


def _absorb_if_depot_sink(state: SimState, t: TrainState) -> None:
    """A train fully inside a non-platform sink block (a depot road) leaves
    the running set."""
    blk = state.model.blocks[t.head_block]
    if blk.platform or blk.succ(t.direction):
        return
    if len(t.trail) != 1 or t.velocity > _EPS:
        return
    depot_station = None
    for s in state.model.stations.values():
        if s.has_depot:
            depot_station = s.id
    t.absorbed = True
    del state.occupancy[t.head_block]
    t.trail.clear()
    state.emit(EVENT_ABSORBED, train=t.id, block=t.head_block, station=depot_station)


def _phase_machine(state: SimState) -> None:
    model = state.model
    for t in state.running_trains():
        if t.phase is TrainPhase.RUNNING:
            blk = model.blocks[t.head_block]
            if (t.velocity < _EPS and blk.platform
                    and blk.length_m - t.head_offset <= 1e-6):
                t.phase = TrainPhase.DWELLING
                t.phase_remaining = state.params.dwell_s
                st = model.station_of_platform_block(t.head_block)
                state.emit(EVENT_ARRIVE, train=t.id, block=t.head_block,
                           station=st[0] if st else None,
                           detail=st[1] if st else "")
        elif t.phase is TrainPhase.DWELLING:
            t.phase_remaining -= 1
            if t.phase_remaining <= 0:
                t.phase = TrainPhase.HELD
                t.phase_remaining = 0
        elif t.phase is TrainPhase.REVERSED_PENDING:
            t.phase_remaining -= 1
            if t.phase_remaining <= 0:
                t.phase = TrainPhase.HELD
                t.phase_remaining = 0
        elif t.phase is TrainPhase.HELD:
            auth, path = movement_authority(state, t)
            blk = model.blocks[t.head_block]
            # at a platform, "departed" means cleared to leave the block, not
            # just free to roll up to its end (a reversal leaves slack behind)
            ready = bool(path) if blk.platform else auth > _EPS
            if ready:
                t.phase = TrainPhase.RUNNING
                st = model.station_of_platform_block(t.head_block)
                state.emit(EVENT_DEPART, train=t.id, block=t.head_block,
                           station=st[0] if st else None, detail=t.direction)


# -- invariant checks (used by tests and the randomized safety harness) ------


def check_invariants(state: SimState) -> List[str]:
    """Return violations of the core safety conditions, empty when healthy."""
    problems: List[str] = []
    seen: Dict[str, str] = {}
    for t in state.running_trains():
        for b in t.trail:
            if b in seen and seen[b] != t.id:
                problems.append(f"block {b} occupied by {seen[b]} and {t.id}")
            seen[b] = t.id
            if state.occupancy.get(b) != t.id:
                problems.append(f"occupancy map out of sync at {b}")
        vmax = min(state.model.blocks[b].vmax_mps for b in t.trail)
        if t.velocity > vmax + 1e-9:
            problems.append(f"train {t.id} overspeed {t.velocity} > {vmax}")
        if t.phase in (TrainPhase.DWELLING, TrainPhase.HELD, TrainPhase.REVERSED_PENDING) \
                and t.velocity > _EPS:
            problems.append(f"train {t.id} moving while {t.phase.value}")
    # single-slot locks make co-junction conflicts structurally impossible;
    # keep the scan so a future multi-lock change cannot silently regress
    for jid, info in state.route_locks.items():
        if info is None:
            continue
        r = state.model.junctions[jid].route(info.route)
        locked_here = [i.route for j, i in state.route_locks.items()
                       if j == jid and i is not None]
        for c in r.conflicts:
            if c in locked_here:
                problems.append(f"conflicting routes {info.route}/{c} locked at {jid}")
    return problems
