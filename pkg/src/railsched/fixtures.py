"""Deterministic desk-scale service fixture: an eight-station double-track
line, a probe-generated cyclic timetable for a six-train fleet, a short-trip
demand matrix and canned scenarios.

The timetable is not hand-written.  A probe train is driven over the line by
a greedy controller, its realized stop pattern is padded to a round cycle
time, and the fleet schedule is that cycle offset by the service headway.
Departures are gated by the compiled rules, so replaying the schedule
reproduces the probe trajectory second for second; mid-service placements
for any start time come from the same per-second recording.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import yaml

from .agents import TimetableAgent
from .driver import ResolvedStart
from .params import SimParams, WEIGHT_PRESETS
from .passenger_flow import ODMatrix, serialize_od_csv
from .route_model import DOWN, UP, RouteModel, parse_route_config
from .sim_core import (
    EVENT_ARRIVE,
    EVENT_DEPART,
    EVENT_REVERSE,
    PROCEED,
    Placement,
    RequestRoute,
    SetSignal,
    SimState,
    TrainPhase,
    init_sim,
    step,
)
from .timetable import (
    POST_PROCEED,
    POST_TO_DEPOT,
    POST_TURN_BACK,
    Timetable,
    TimetableEntry,
    extract_operation_rules,
    serialize_timetable_csv,
)

PLATFORM_LEN = 250.0
PLATFORM_VMAX = 20.0
RUN_LEN = 800.0
RUN_VMAX = 25.0
DEPOT_LEN = 400.0
DEPOT_VMAX = 15.0
PLATFORM_CAP = 400
TRAIN_LEN = 150.0
TRAIN_CAP = 600

DAY_START_S = 21600       # 06:00
SERVICE_END_S = 75600     # 21:00, last cycles wind down to the depot after
DAY_HORIZON_S = 57600     # 16 h of simulated operation

OD_BUCKETS = ((0, 0.6), (25200, 2.0), (32400, 1.0), (61200, 1.8), (68400, 0.7))


# -- line construction -------------------------------------------------------


def make_line_config(n_stations: int = 8, mid_turnbacks: Tuple[int, ...] = (3, 6),
                     depot: bool = True) -> dict:
    """Config document for a double-track line with turnback crossovers at the
    terminals and at ``mid_turnbacks``, plus a depot road off station 1."""
    if n_stations < 2:
        raise ValueError("need at least two stations")
    turn_set = {1, n_stations} | {k for k in mid_turnbacks if 1 < k < n_stations}
    stations, blocks, junctions = [], [], []
    for k in range(1, n_stations + 1):
        stations.append({
            "id": f"s{k}", "name": f"Station {k}",
            "can_turn_back": k in turn_set,
            "has_depot": depot and k == 1,
            "platforms": [
                {"id": f"p{k}u", "block": f"p{k}u", "capacity": PLATFORM_CAP},
                {"id": f"p{k}d", "block": f"p{k}d", "capacity": PLATFORM_CAP},
            ],
        })

    def block(bid, length, vmax, up=(), down=(), platform=False):
        blocks.append({"id": bid, "length_m": length, "vmax_mps": vmax,
                       "succ_up": list(up), "succ_down": list(down),
                       "platform": platform})

    for k in range(1, n_stations + 1):
        up = [f"r{k}{k + 1}u"] if k < n_stations else []
        down = [f"r{k}{k - 1}d"] if k > 1 else []
        up_cross = [f"p{k}d"] if (k in turn_set and k > 1) else []
        block(f"p{k}u", PLATFORM_LEN, PLATFORM_VMAX, up=up,
              down=up_cross, platform=True)
        if k == 1:
            down_cross = [f"p{k}u"] + (["dep1"] if depot else [])
        elif k in turn_set and k < n_stations:
            down_cross = [f"p{k}u"]
        else:
            down_cross = []
        block(f"p{k}d", PLATFORM_LEN, PLATFORM_VMAX, down=down,
              up=down_cross, platform=True)
    for k in range(1, n_stations):
        block(f"r{k}{k + 1}u", RUN_LEN, RUN_VMAX, up=[f"p{k + 1}u"])
        block(f"r{k + 1}{k}d", RUN_LEN, RUN_VMAX, down=[f"p{k}d"])
    if depot:
        block("dep1", DEPOT_LEN, DEPOT_VMAX)

    for k in sorted(turn_set):
        routes = []
        if k == 1:
            routes.append({"id": f"x{k}du", "blocks": [f"p{k}u"], "approach": f"p{k}d",
                           "conflicts": ([f"x{k}dep"] if depot else [])})
            if depot:
                routes.append({"id": f"x{k}dep", "blocks": ["dep1"], "approach": f"p{k}d",
                               "conflicts": [f"x{k}du"]})
        elif k == n_stations:
            routes.append({"id": f"x{k}ud", "blocks": [f"p{k}d"], "approach": f"p{k}u",
                           "conflicts": []})
        else:
            routes.append({"id": f"x{k}ud", "blocks": [f"p{k}d"], "approach": f"p{k}u",
                           "conflicts": [f"x{k}du"]})
            routes.append({"id": f"x{k}du", "blocks": [f"p{k}u"], "approach": f"p{k}d",
                           "conflicts": [f"x{k}ud"]})
        junctions.append({"id": f"t{k}", "routes": routes})
    return {"stations": stations, "blocks": blocks, "junctions": junctions}


def make_model(n_stations: int = 8, mid_turnbacks: Tuple[int, ...] = (3, 6),
               depot: bool = True) -> RouteModel:
    return parse_route_config(yaml.safe_dump(
        make_line_config(n_stations, mid_turnbacks, depot)))


# -- demand ------------------------------------------------------------------


def make_od_records(n_stations: int = 8, scale: float = 0.9) -> List[Tuple[str, str, int, float]]:
    """Piecewise-constant arrival rates, short trips weighted up and peak
    periods scaled by the bucket multipliers."""
    ids = [f"s{k}" for k in range(1, n_stations + 1)]
    weights = {}
    for i, o in enumerate(ids):
        for j, d in enumerate(ids):
            if i != j:
                weights[(o, d)] = 1.0 / (1.0 + abs(i - j))
    norm = sum(weights.values())
    records = []
    for (o, d), w in sorted(weights.items()):
        for start, mult in OD_BUCKETS:
            records.append((o, d, start, round(scale * mult * w / norm, 9)))
    return records


# -- probe run ---------------------------------------------------------------


@dataclass
class CycleStop:
    """One stop of the canonical service cycle, times relative to cycle start."""
    station: str
    platform: str
    arrive: int
    depart: int
    post: str


@dataclass
class _Snap:
    block: str
    offset: float
    direction: str
    velocity: float
    phase: TrainPhase
    remaining: int
    clean: bool
    signals: Tuple[str, ...]
    locks: Tuple[Tuple[str, str, bool], ...]


def _up_platform(model: RouteModel, station: str) -> str:
    for p in model.stations[station].platforms:
        if model.blocks[p.block].succ_up and not model.blocks[p.block].succ_down:
            return p.block
    return model.stations[station].platforms[0].block


def _greedy_commands(state: SimState, train_id: str) -> List[object]:
    t = state.trains[train_id]
    if t.phase is not TrainPhase.HELD:
        return []
    blk = state.model.blocks[t.head_block]
    if not blk.platform:
        return []
    if blk.succ(t.direction):
        dep = state.model.departure_point(t.head_block, t.direction)
        if dep is not None and state.signal_aspects[dep.id] != PROCEED:
            return [SetSignal(dep.id, PROCEED)]
        return []
    found = state.model.turnback_route_from(t.head_block, t.direction)
    if found is None:
        return []
    jid, rid = found
    lock = state.route_locks.get(jid)
    if lock is None or lock.route != rid:
        return [RequestRoute(jid, rid)]
    return []


def _collect_stops(log: List[dict]) -> List[dict]:
    """Pair arrive/depart/reverse events into stop records, in order."""
    stops: List[dict] = []
    open_stop: Optional[dict] = None
    for ev in log:
        if ev["kind"] == EVENT_ARRIVE:
            open_stop = {"station": ev["station"], "platform": ev["detail"],
                         "block": ev["block"], "arrive": ev["t"],
                         "depart": None, "turned": False}
        elif ev["kind"] == EVENT_REVERSE and open_stop is not None:
            open_stop["turned"] = True
        elif ev["kind"] == EVENT_DEPART and open_stop is not None \
                and ev["block"] == open_stop["block"]:
            open_stop["depart"] = ev["t"]
            stops.append(open_stop)
            open_stop = None
    return stops


def probe_cycle(model: RouteModel, params: SimParams,
                max_steps: int = 30000) -> Tuple[List[CycleStop], int]:
    """Drive one train greedily round the line and return the steady-state
    stop cycle (relative times) plus its raw duration."""
    home = _up_platform(model, "s1")
    state = init_sim(model, [Placement("probe", home, PLATFORM_LEN, UP,
                                       length_m=TRAIN_LEN, capacity=TRAIN_CAP,
                                       phase=TrainPhase.HELD)], params)
    home_departs = 0
    for _ in range(max_steps):
        evs = step(state, _greedy_commands(state, "probe"))
        for ev in evs:
            if ev["kind"] == EVENT_DEPART and ev["block"] == home:
                home_departs += 1
        if home_departs >= 3:
            break
    else:
        raise RuntimeError("probe never completed two service cycles")
    stops = _collect_stops(state.log)
    home_arrivals = [s["arrive"] for s in stops if s["block"] == home]
    if len(home_arrivals) < 2:
        raise RuntimeError("probe cycle extraction failed")
    a0, a1 = home_arrivals[0], home_arrivals[1]
    cycle = [CycleStop(s["station"], s["platform"], s["arrive"] - a0,
                       s["depart"] - a0,
                       POST_TURN_BACK if s["turned"] else POST_PROCEED)
             for s in stops if a0 <= s["arrive"] < a1]
    return cycle, a1 - a0


def pad_cycle(cycle: List[CycleStop], raw_s: int) -> Tuple[List[CycleStop], int]:
    """Stretch the raw cycle to a round duration divisible by 360 so the
    six-train headway is a whole number of minutes.  The slack is spread over
    every stop so no stand grows by more than a few seconds."""
    cycle_s = max(1800, -(-(raw_s + 30) // 360) * 360)
    slack = cycle_s - raw_s
    n = len(cycle)
    base, extra = divmod(slack, n)
    out, shift = [], 0
    for i, s in enumerate(cycle):
        arrive = s.arrive + shift
        shift += base + (1 if i < extra else 0)
        out.append(CycleStop(s.station, s.platform, arrive, s.depart + shift, s.post))
    return out, cycle_s


# -- fleet schedule ----------------------------------------------------------


def fleet_timetable(cycle: List[CycleStop], cycle_s: int, n_trains: int) -> Timetable:
    """Offset copies of the padded cycle for each train, ending with a pull
    back to the depot after the last full cycle."""
    if cycle[-1].station != "s1" or cycle[-1].post != POST_TURN_BACK:
        raise RuntimeError("cycle does not end with the home turnback")
    headway = cycle_s // n_trains
    entries: List[TimetableEntry] = []
    for k in range(n_trains):
        tid = f"tr{k + 1}"
        anchor = DAY_START_S + k * headway
        c_last = (SERVICE_END_S - anchor) // cycle_s - 1
        rows: List[TimetableEntry] = []
        for c in range(-1, c_last + 1):
            base = anchor + c * cycle_s
            for s in cycle:
                rows.append(TimetableEntry(tid, s.station, base + s.arrive,
                                           base + s.depart, s.platform, s.post))
        rows[-1] = TimetableEntry(tid, rows[-1].station, rows[-1].arrive_s,
                                  rows[-1].depart_s, rows[-1].platform,
                                  POST_TO_DEPOT)
        entries.extend(rows)
    return Timetable(entries)


# -- canonical state recording ----------------------------------------------


def record_cycle_states(model: RouteModel, params: SimParams,
                        cycle: List[CycleStop], cycle_s: int) -> Dict[int, _Snap]:
    """Replay four cycles of the padded schedule with a single train and
    record the full per-second state.  Also asserts the replay realizes the
    schedule (within 2 s) and is periodic by construction."""
    tid = "tr1"
    entries = [TimetableEntry(tid, s.station, DAY_START_S + c * cycle_s + s.arrive,
                              DAY_START_S + c * cycle_s + s.depart, s.platform, s.post)
               for c in range(4) for s in cycle]
    tt = Timetable(entries)
    rules = extract_operation_rules(model, tt, params)
    agent = TimetableAgent(rules)
    home = _up_platform(model, "s1")
    state = init_sim(model, [Placement(tid, home, PLATFORM_LEN, UP,
                                       length_m=TRAIN_LEN, capacity=TRAIN_CAP,
                                       phase=TrainPhase.DWELLING,
                                       phase_remaining=params.dwell_s)],
                     params, clock=DAY_START_S)
    snaps: Dict[int, _Snap] = {}

    def snapshot(st: SimState) -> None:
        t = st.trains[tid]
        snaps[st.clock] = _Snap(
            t.head_block, t.head_offset, t.direction, t.velocity,
            t.phase, t.phase_remaining, len(t.trail) == 1,
            tuple(sorted(cp for cp, a in st.signal_aspects.items() if a == PROCEED)),
            tuple(sorted((j, i.route, i.entered)
                         for j, i in st.route_locks.items() if i is not None)))

    for _ in range(4 * cycle_s):
        step(state, agent.commands(state), per_second_hook=snapshot)

    sched = [(e, kind) for e in tt.entries for kind in ("arrive", "depart")][1:]
    got = [ev for ev in state.log if ev["kind"] in (EVENT_ARRIVE, EVENT_DEPART)]
    for (entry, kind), ev in zip(sched, got):
        want = entry.arrive_s if kind == "arrive" else entry.depart_s
        if abs(ev["t"] - want) > 2 or ev["station"] != entry.station:
            raise RuntimeError(
                f"replay diverged from schedule at {entry.station} "
                f"{kind} {want}: got {ev['kind']}@{ev['t']} {ev['station']}")
    w2 = DAY_START_S + 2 * cycle_s
    for tau in range(w2, w2 + cycle_s, 97):
        a, b = snaps[tau], snaps[tau + cycle_s]
        if (a.block != b.block or a.direction != b.direction or a.phase != b.phase
                or abs(a.offset - b.offset) > 1e-6 or abs(a.velocity - b.velocity) > 1e-6
                or a.signals != b.signals or a.locks != b.locks):
            raise RuntimeError(f"replay not periodic at t={tau}")
    return snaps


# -- the bundle --------------------------------------------------------------


@dataclass
class ServiceFixture:
    model: RouteModel
    params: SimParams
    timetable: Timetable
    od_records: List[Tuple[str, str, int, float]]
    cycle: List[CycleStop]
    cycle_s: int
    headway_s: int
    n_trains: int
    states: Dict[int, _Snap]
    window_start: int

    @property
    def od(self) -> ODMatrix:
        return ODMatrix(self.od_records)

    def train_ids(self) -> List[str]:
        return [f"tr{k + 1}" for k in range(self.n_trains)]

    def placements_at(self, t0_wish: int):
        """Fleet state at the first 'clean' second at or after ``t0_wish``
        (every train fully inside one block): (t0, placements, signals, locks).
        """
        for t0 in range(t0_wish, t0_wish + self.cycle_s + 1):
            taus = [self.window_start
                    + (t0 - (DAY_START_S + k * self.headway_s)) % self.cycle_s
                    for k in range(self.n_trains)]
            snaps = [self.states[tau] for tau in taus]
            if not all(s.clean for s in snaps):
                continue
            placements, signals, locks = [], {}, {}
            ok = True
            for k, s in enumerate(snaps):
                placements.append(Placement(
                    f"tr{k + 1}", s.block, s.offset, s.direction,
                    length_m=TRAIN_LEN, capacity=TRAIN_CAP,
                    velocity=s.velocity, phase=s.phase,
                    phase_remaining=s.remaining))
                for cp in s.signals:
                    if signals.get(cp, PROCEED) != PROCEED:
                        ok = False
                    signals[cp] = PROCEED
                for jid, rid, entered in s.locks:
                    if jid in locks and locks[jid] != (rid, entered):
                        ok = False
                    locks[jid] = (rid, entered)
            if ok:
                return t0, placements, signals, locks
        raise RuntimeError(f"no clean start second near t={t0_wish}")

    def start_at(self, t0_wish: int) -> ResolvedStart:
        t0, placements, signals, locks = self.placements_at(t0_wish)
        return ResolvedStart(t0, placements, signals, locks)

    def write_files(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "route": os.path.join(out_dir, "route.yaml"),
            "timetable": os.path.join(out_dir, "timetable.csv"),
            "od": os.path.join(out_dir, "od.csv"),
            "scenario_baseline": os.path.join(out_dir, "scenario_baseline.json"),
            "scenario_disruption": os.path.join(out_dir, "scenario_disruption.json"),
        }
        with open(paths["route"], "w", encoding="utf-8") as fh:
            fh.write(yaml.safe_dump(make_line_config(), sort_keys=False))
        with open(paths["timetable"], "w", encoding="utf-8", newline="") as fh:
            fh.write(serialize_timetable_csv(self.timetable))
        with open(paths["od"], "w", encoding="utf-8", newline="") as fh:
            fh.write(serialize_od_csv(self.od_records))
        with open(paths["scenario_baseline"], "w", encoding="utf-8") as fh:
            json.dump(baseline_scenario(), fh, indent=2)
            fh.write("\n")
        with open(paths["scenario_disruption"], "w", encoding="utf-8") as fh:
            json.dump(disruption_scenario(), fh, indent=2)
            fh.write("\n")
        return paths


def build_service(n_stations: int = 8, n_trains: int = 6,
                  params: Optional[SimParams] = None) -> ServiceFixture:
    params = params or SimParams()
    model = make_model(n_stations)
    raw_cycle, raw_s = probe_cycle(model, params)
    cycle, cycle_s = pad_cycle(raw_cycle, raw_s)
    headway = cycle_s // n_trains
    max_stand = max(s.depart - s.arrive for s in cycle)
    if max_stand + 120 > headway:
        raise RuntimeError(f"stand {max_stand}s too long for headway {headway}s")
    tt = fleet_timetable(cycle, cycle_s, n_trains)
    states = record_cycle_states(model, params, cycle, cycle_s)
    return ServiceFixture(model=model, params=params, timetable=tt,
                          od_records=make_od_records(n_stations),
                          cycle=cycle, cycle_s=cycle_s, headway_s=headway,
                          n_trains=n_trains, states=states,
                          window_start=DAY_START_S + 2 * cycle_s)


_SERVICE: Optional[ServiceFixture] = None


def service_fixture() -> ServiceFixture:
    """Process-wide cached default fixture (building it runs the probe)."""
    global _SERVICE
    if _SERVICE is None:
        _SERVICE = build_service()
    return _SERVICE


# -- scenarios ---------------------------------------------------------------


def mid_disruption_blocks(n_stations: int = 8) -> List[str]:
    a = n_stations // 2
    return [f"r{a}{a + 1}u", f"r{a + 1}{a}d"]


def start_payload(start: ResolvedStart) -> dict:
    """JSON-ready form of a resolved fleet state."""
    return {
        "clock": start.clock,
        "placements": [{
            "train": p.train, "block": p.block, "offset": p.offset,
            "direction": p.direction, "length_m": p.length_m,
            "capacity": p.capacity, "velocity": p.velocity,
            "phase": p.phase.value, "phase_remaining": p.phase_remaining,
        } for p in start.placements],
        "signals": dict(start.signals),
        "locks": {j: [r, e] for j, (r, e) in sorted(start.locks.items())},
    }


def baseline_scenario() -> dict:
    """Whole undisrupted service day under the timetable agent."""
    fx = service_fixture()
    start = fx.start_at(DAY_START_S)
    return {
        "name": "baseline_day",
        "sim_start_s": start.clock,
        "horizon_s": DAY_HORIZON_S,
        "disruptions": [],
        "weights": "throughput",
        "seed": 0,
        "start": start_payload(start),
    }


def disruption_scenario() -> dict:
    """Morning mid-line blockage, 30 minutes, three-hour window."""
    fx = service_fixture()
    start = fx.start_at(27000)         # 07:30
    return {
        "name": "midline_blockage",
        "sim_start_s": start.clock,
        "horizon_s": 10800,
        "disruptions": [{"blocks": mid_disruption_blocks(),
                         "start_s": start.clock + 180, "duration_s": 1800}],
        "weights": "recovery",
        "seed": 0,
        "start": start_payload(start),
    }


# -- episode configurations --------------------------------------------------


def episode_config(fx: Optional[ServiceFixture] = None, *,
                   weights: str = "throughput", horizon_s: int = 10800,
                   start_window: Tuple[int, int] = (25200, 30600),
                   disruption_choices: Optional[Tuple[Tuple[str, ...], ...]] = None,
                   onset_window: Tuple[int, int] = (120, 300),
                   duration_range: Tuple[int, int] = (1500, 2100),
                   decision_interval_s: int = 60, seed: int = 0,
                   stochastic_passengers: bool = False):
    """Standard training episode over the service fixture: a morning slice
    with a randomized mid-line blockage."""
    from .rl_env import EpisodeConfig

    fx = fx or service_fixture()
    if disruption_choices is None:
        disruption_choices = (tuple(mid_disruption_blocks()),)
    return EpisodeConfig(
        model=fx.model, timetable=fx.timetable, od=fx.od, params=fx.params,
        start_lookup=fx.start_at, start_window=start_window,
        disruption_choices=disruption_choices, onset_window=onset_window,
        duration_range=duration_range, horizon_s=horizon_s,
        decision_interval_s=decision_interval_s,
        weights=WEIGHT_PRESETS[weights], seed=seed,
        stochastic_passengers=stochastic_passengers)


def toy_episode_config(seed: int = 0):
    """Single-decision task: one macro choice, latched for the whole episode,
    under a fixed blockage covering most of it."""
    return episode_config(
        weights="throughput", horizon_s=1500, start_window=(27000, 27000),
        onset_window=(0, 0), duration_range=(1500, 1500),
        decision_interval_s=1500, seed=seed)
