"""Scenario runs: execute one controller over one scenario and record it all.

A scenario file pins down everything stochastic about a run: the start
second, a resolved fleet state for that second, the disruption list, the
reward preset name, and the base seed.  ``run_scenario`` loads the inputs
from disk, ``run_resolved`` works on already-parsed objects; both return a
``RunRecord`` holding per-second train positions, the full event log,
per-second stop flags, deviation samples, and block entry counts.  Metrics
and comparisons are pure functions of the record, so two processes replaying
the same scenario produce byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .agents import assign_control
from .driver import ResolvedStart, ServiceDriver
from .params import SimParams, WEIGHT_PRESETS
from .passenger_flow import ODMatrix, serialize_od_csv
from .route_model import RouteModel, serialize_route_config
from .sim_core import (
    EVENT_ABSORBED,
    EVENT_ARRIVE,
    EVENT_DEPART,
    EVENT_REVERSE,
    EVENT_STOP_BEGIN,
    Disruption,
    Placement,
    TrainPhase,
)
from .storage import load_npz, save_npz
from .timetable import (
    POST_PROCEED,
    POST_TO_DEPOT,
    POST_TURN_BACK,
    PlannedProfile,
    Timetable,
    TimetableEntry,
    extract_operation_rules,
    serialize_timetable_csv,
)

CONTROLLERS = ("timetable", "all_proceed", "policy")
DEVIATION_SAMPLE_S = 15


# -- scenario files ----------------------------------------------------------


@dataclass
class ScenarioDisruption:
    blocks: Tuple[str, ...]
    start_s: int
    duration_s: int


@dataclass
class Scenario:
    """One reproducible run setup, including the resolved start state."""
    name: str
    sim_start_s: int
    horizon_s: int
    disruptions: List[ScenarioDisruption]
    weights: str
    seed: int
    start: dict

    def weight_preset(self):
        if self.weights not in WEIGHT_PRESETS:
            raise ValueError(f"unknown weight preset {self.weights!r}")
        return WEIGHT_PRESETS[self.weights]


def scenario_from_dict(d: dict) -> Scenario:
    try:
        disruptions = [ScenarioDisruption(tuple(x["blocks"]), int(x["start_s"]),
                                          int(x["duration_s"]))
                       for x in d.get("disruptions", [])]
        scen = Scenario(
            name=str(d["name"]), sim_start_s=int(d["sim_start_s"]),
            horizon_s=int(d["horizon_s"]), disruptions=disruptions,
            weights=str(d.get("weights", "throughput")),
            seed=int(d.get("seed", 0)), start=dict(d["start"]))
    except KeyError as exc:
        raise ValueError(f"scenario is missing field {exc.args[0]!r}") from exc
    if scen.horizon_s <= 0:
        raise ValueError("scenario horizon_s must be positive")
    if int(scen.start.get("clock", -1)) != scen.sim_start_s:
        raise ValueError("scenario sim_start_s disagrees with embedded start state")
    for x in scen.disruptions:
        if x.start_s < scen.sim_start_s:
            raise ValueError("disruption starts before the scenario does")
    scen.weight_preset()
    return scen


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "name": s.name, "sim_start_s": s.sim_start_s, "horizon_s": s.horizon_s,
        "disruptions": [{"blocks": list(x.blocks), "start_s": x.start_s,
                         "duration_s": x.duration_s} for x in s.disruptions],
        "weights": s.weights, "seed": s.seed, "start": s.start,
    }


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        return scenario_from_dict(yaml.safe_load(text))
    return scenario_from_dict(json.loads(text))


def resolved_start_from_payload(payload: dict) -> ResolvedStart:
    placements = [Placement(
        train=p["train"], block=p["block"], offset=float(p["offset"]),
        direction=p["direction"], length_m=float(p["length_m"]),
        capacity=int(p["capacity"]), velocity=float(p["velocity"]),
        phase=TrainPhase(p["phase"]), phase_remaining=int(p["phase_remaining"]),
    ) for p in payload["placements"]]
    locks = {j: (r, bool(e)) for j, (r, e) in payload.get("locks", {}).items()}
    return ResolvedStart(clock=int(payload["clock"]), placements=placements,
                         signals=dict(payload.get("signals", {})), locks=locks)


# -- fingerprints ------------------------------------------------------------


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def scenario_fingerprint(model: RouteModel, tt: Timetable, od: Optional[ODMatrix],
                         scenario: Scenario) -> str:
    """Digest of the full run setup, from canonical serializations so that
    file-loaded and in-memory inputs with the same content agree."""
    blob = json.dumps({
        "route": serialize_route_config(model),
        "timetable": serialize_timetable_csv(tt),
        "od": serialize_od_csv(od.records()) if od is not None else "",
        "scenario": scenario_to_dict(scenario),
    }, sort_keys=True)
    return _sha256(blob)


def config_fingerprint(scen_fp: str, controller: str, checkpoint_digest: str,
                       horizon_s: int, seed: int) -> str:
    return _sha256(json.dumps({
        "scenario": scen_fp, "controller": controller,
        "checkpoint": checkpoint_digest, "horizon_s": horizon_s, "seed": seed,
    }, sort_keys=True))


# -- run record --------------------------------------------------------------


@dataclass
class RunRecord:
    """Everything one run produced, enough to re-derive every metric.

    ``positions`` has one row per second starting at ``clock0`` (so
    ``horizon_s + 1`` rows), one column per train in ``train_ids`` order,
    line coordinates in metres, NaN once a train is absorbed.  ``stop_flags``
    has one row per elapsed second, 1 where the train spent that second
    stopped between stations.  ``wall_clock_s`` is measurement metadata and
    is not part of the stored artifact.
    """
    controller: str
    seed: int
    clock0: int
    horizon_s: int
    train_ids: List[str]
    positions: np.ndarray
    stop_flags: np.ndarray
    events: List[dict]
    disruption_spans: List[Tuple[int, int, float, float]]
    deviation_samples: List[Tuple[int, int]]
    block_entries: Dict[str, int]
    arrived: int
    final_conservation_error: int
    scenario_fp: str
    config_fp: str
    decisions: List[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0


@dataclass
class Metrics:
    arrived: int
    stop_seconds: int
    stop_events: int
    mean_deviation: float
    trains_per_hour: Dict[str, float]

    def as_dict(self) -> dict:
        return {
            "arrived": self.arrived, "stop_seconds": self.stop_seconds,
            "stop_events": self.stop_events,
            "mean_deviation": self.mean_deviation,
            "trains_per_hour": dict(sorted(self.trains_per_hour.items())),
        }


def compute_metrics(record: RunRecord) -> Metrics:
    """Pure function of the record; counts events by kind, so it is
    insensitive to event ordering within a second."""
    stop_events = sum(1 for ev in record.events if ev["kind"] == EVENT_STOP_BEGIN)
    devs = [d for _, d in record.deviation_samples]
    hours = record.horizon_s / 3600.0
    tph = {b: n / hours for b, n in sorted(record.block_entries.items())}
    return Metrics(
        arrived=record.arrived,
        stop_seconds=int(record.stop_flags.sum()),
        stop_events=stop_events,
        mean_deviation=float(np.mean(devs)) if devs else 0.0,
        trains_per_hour=tph)


def compare_records(baseline: RunRecord, candidate: RunRecord) -> dict:
    """Side-by-side metrics with percent deltas; refuses to compare runs of
    different scenarios."""
    if baseline.scenario_fp != candidate.scenario_fp:
        raise ValueError("records come from different scenarios "
                         f"({baseline.scenario_fp[:12]} vs {candidate.scenario_fp[:12]})")
    mb, mc = compute_metrics(baseline), compute_metrics(candidate)
    deltas: Dict[str, Optional[float]] = {}
    for key in ("arrived", "stop_seconds", "stop_events", "mean_deviation"):
        b, c = getattr(mb, key), getattr(mc, key)
        deltas[key] = None if b == 0 else 100.0 * (c - b) / b
    return {
        "baseline": {"controller": baseline.controller, **mb.as_dict()},
        "candidate": {"controller": candidate.controller, **mc.as_dict()},
        "delta_pct": deltas,
    }


# -- recording ---------------------------------------------------------------


class Recorder:
    """Per-second observer: positions, stop flags, events, block entries,
    periodic deviation samples."""

    def __init__(self, model: RouteModel, tt: Timetable, params: SimParams):
        self.model = model
        self._profile = PlannedProfile(model, tt, params)
        self._meter = None
        self.positions: List[List[float]] = []
        self.stop_flags: List[List[int]] = []
        self.events: List[dict] = []
        self.deviation_samples: List[Tuple[int, int]] = []
        self.block_entries: Dict[str, int] = {}
        self.train_ids: List[str] = []
        self._prev_block: Dict[str, Optional[str]] = {}
        self._clock0 = 0

    def _measure(self, driver: ServiceDriver) -> None:
        if self._meter is None:
            from .rl_env import DeviationMeter
            self._meter = DeviationMeter(self._profile)
        self.deviation_samples.append(
            (driver.clock, self._meter.measure(driver.state)))

    def _position_row(self, driver: ServiceDriver) -> List[float]:
        pos = driver.positions()
        return [math.nan if pos[t] is None else pos[t] for t in self.train_ids]

    def start(self, driver: ServiceDriver) -> None:
        self.train_ids = sorted(driver.state.trains)
        self._clock0 = driver.clock
        self._prev_block = {t: driver.state.trains[t].head_block
                            for t in self.train_ids}
        self.positions.append(self._position_row(driver))
        self._measure(driver)

    def observe(self, driver: ServiceDriver, events: List[dict]) -> None:
        self.events.extend(events)
        self.positions.append(self._position_row(driver))
        row = []
        for tid in self.train_ids:
            tr = driver.state.trains[tid]
            row.append(1 if (not tr.absorbed and tr.in_interstation_stop) else 0)
            if not tr.absorbed and tr.head_block != self._prev_block[tid]:
                self.block_entries[tr.head_block] = \
                    self.block_entries.get(tr.head_block, 0) + 1
                self._prev_block[tid] = tr.head_block
        self.stop_flags.append(row)
        if (driver.clock - self._clock0) % DEVIATION_SAMPLE_S == 0:
            self._measure(driver)


def _disruption_spans(model: RouteModel,
                      disruptions: Sequence[Disruption]) -> List[Tuple[int, int, float, float]]:
    spans = []
    for d in disruptions:
        lo = min(model.block_span[b][0] for b in d.blocks)
        hi = max(model.block_span[b][1] for b in d.blocks)
        spans.append((d.start_s, d.start_s + d.duration_s, lo, hi))
    return spans


# -- running -----------------------------------------------------------------


def run_resolved(model: RouteModel, tt: Timetable, od: Optional[ODMatrix],
                 scenario: Scenario, *, controller: str = "timetable",
                 checkpoint_params: Optional[dict] = None,
                 checkpoint_digest: str = "", horizon_s: Optional[int] = None,
                 seed: Optional[int] = None,
                 params: Optional[SimParams] = None) -> RunRecord:
    """Run one controller over one scenario and record every second."""
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}; "
                         f"choose from {', '.join(CONTROLLERS)}")
    params = params or SimParams()
    horizon = int(horizon_s) if horizon_s is not None else scenario.horizon_s
    run_seed = int(seed) if seed is not None else scenario.seed
    scen_fp = scenario_fingerprint(model, tt, od, scenario)
    cfg_fp = config_fingerprint(scen_fp, controller, checkpoint_digest,
                                horizon, run_seed)

    start = resolved_start_from_payload(scenario.start)
    disruptions = [Disruption(set(x.blocks), x.start_s, x.duration_s)
                   for x in scenario.disruptions]
    recorder = Recorder(model, tt, params)
    t_wall = time.monotonic()
    decisions: List[dict] = []

    if controller == "policy":
        driver = _run_policy(model, tt, od, scenario, params, checkpoint_params,
                             horizon, run_seed, recorder, decisions)
    else:
        assignment = (assign_control(model, disruptions)
                      if controller == "all_proceed" else None)
        rules = extract_operation_rules(model, tt, params)
        driver = ServiceDriver(model, params, start, rules=rules,
                               assignment=assignment, od=od, seed=run_seed,
                               disruptions=disruptions)
        recorder.start(driver)
        for _ in range(horizon):
            events = driver.tick()
            recorder.observe(driver, events)

    wall = time.monotonic() - t_wall
    return RunRecord(
        controller=controller, seed=run_seed, clock0=start.clock,
        horizon_s=horizon, train_ids=recorder.train_ids,
        positions=np.asarray(recorder.positions, dtype=np.float64),
        stop_flags=np.asarray(recorder.stop_flags, dtype=np.uint8),
        events=recorder.events, disruption_spans=_disruption_spans(model, disruptions),
        deviation_samples=recorder.deviation_samples,
        block_entries=recorder.block_entries, arrived=driver.arrived(),
        final_conservation_error=driver.conservation_error(),
        scenario_fp=scen_fp, config_fp=cfg_fp, decisions=decisions,
        wall_clock_s=wall)


def _run_policy(model, tt, od, scenario: Scenario, params, checkpoint_params,
                horizon: int, seed: int, recorder: Recorder,
                decisions: List[dict]) -> ServiceDriver:
    from .evaluation import scenario_episode_config
    from .ppo import greedy_action, params_shape, policy_forward
    from .rl_env import RailEnv

    if checkpoint_params is None:
        raise ValueError("controller 'policy' needs a checkpoint")
    cfg = scenario_episode_config(model, tt, od, scenario, horizon_s=horizon,
                                  seed=seed, params=params)
    env = RailEnv(cfg)

    shape = params_shape(checkpoint_params)
    expected = (env.obs_dim, env.n_points, env.n_actions)
    if shape[:3] != expected:
        raise ValueError(
            f"checkpoint shape {shape[:3]} does not fit this route "
            f"(needs obs_dim={expected[0]}, points={expected[1]}, "
            f"actions={expected[2]})")

    obs = env.reset(seed=seed)
    recorder.start(env.driver)
    env.on_tick = recorder.observe
    done = horizon <= 0
    while not done:
        logits, _ = policy_forward(checkpoint_params, obs)
        acts = greedy_action(logits)
        decisions.append({"t": env.driver.clock,
                          "actions": {p.key: int(a)
                                      for p, a in zip(env.points, acts)}})
        obs, _, done, _ = env.step(acts)
    return env.driver


def run_scenario(route_path: str, timetable_path: str, od_path: Optional[str],
                 scenario_path: str, *, controller: str = "timetable",
                 checkpoint_path: Optional[str] = None,
                 horizon_s: Optional[int] = None,
                 seed: Optional[int] = None) -> RunRecord:
    """File-path front end of ``run_resolved``."""
    from .ppo import load_checkpoint
    from .route_model import load_route_model
    from .passenger_flow import load_od_matrix
    from .timetable import load_timetable

    model = load_route_model(route_path)
    tt = load_timetable(timetable_path)
    od = load_od_matrix(od_path) if od_path else None
    scenario = load_scenario(scenario_path)
    checkpoint_params = None
    digest = ""
    if checkpoint_path:
        checkpoint_params = load_checkpoint(checkpoint_path)
        with open(checkpoint_path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
    return run_resolved(model, tt, od, scenario, controller=controller,
                        checkpoint_params=checkpoint_params,
                        checkpoint_digest=digest, horizon_s=horizon_s,
                        seed=seed)


# -- realized plan -----------------------------------------------------------


def realized_timetable(record: RunRecord, model: RouteModel) -> Timetable:
    """Reconstruct the plan that actually ran from the event log.

    Arrive/depart pairs become rows; a reversal during the visit marks it
    turn_back; absorption rewrites the train's last row to_depot.  Trains
    already dwelling at the start get a synthetic arrival at ``clock0``, and
    visits still open at the end are closed at the final second.
    """
    rows: List[TimetableEntry] = []
    open_rows: Dict[str, dict] = {}
    end_clock = record.clock0 + record.horizon_s

    def platform_of(block: str) -> str:
        hit = model.station_of_platform_block(block)
        return hit[1] if hit else block

    def close(train: str, depart_s: int, post: Optional[str] = None) -> None:
        cur = open_rows.pop(train, None)
        if cur is None:
            return
        rows.append(TimetableEntry(
            train=train, station=cur["station"], arrive_s=cur["arrive_s"],
            depart_s=depart_s, platform=cur["platform"],
            post_action=post or cur["post"]))

    for ev in record.events:
        kind, train = ev["kind"], ev["train"]
        if not train:
            continue
        if kind == EVENT_ARRIVE:
            open_rows[train] = {"station": ev["station"], "arrive_s": ev["t"],
                                "platform": platform_of(ev["block"]),
                                "post": POST_PROCEED}
        elif kind == EVENT_REVERSE:
            if train in open_rows:
                open_rows[train]["post"] = POST_TURN_BACK
        elif kind == EVENT_DEPART:
            if train not in open_rows:
                open_rows[train] = {"station": ev["station"],
                                    "arrive_s": record.clock0,
                                    "platform": platform_of(ev["block"]),
                                    "post": POST_PROCEED}
            close(train, ev["t"])
        elif kind == EVENT_ABSORBED:
            if train in open_rows:
                close(train, ev["t"], post=POST_TO_DEPOT)
            else:
                for i in range(len(rows) - 1, -1, -1):
                    if rows[i].train == train:
                        rows[i] = replace(rows[i], post_action=POST_TO_DEPOT)
                        break
    for train in sorted(open_rows):
        close(train, end_clock)
    return Timetable(rows)


# -- persistence -------------------------------------------------------------


def _json_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)


def save_record(path: str, record: RunRecord) -> None:
    meta = {
        "controller": record.controller, "seed": record.seed,
        "clock0": record.clock0, "horizon_s": record.horizon_s,
        "train_ids": record.train_ids,
        "disruption_spans": [list(s) for s in record.disruption_spans],
        "block_entries": record.block_entries, "arrived": record.arrived,
        "final_conservation_error": record.final_conservation_error,
        "scenario_fp": record.scenario_fp, "config_fp": record.config_fp,
    }
    save_npz(path, {
        "positions": record.positions,
        "stop_flags": record.stop_flags,
        "deviation_samples": np.asarray(record.deviation_samples,
                                        dtype=np.int64).reshape(-1, 2),
        "events": _json_array(record.events),
        "decisions": _json_array(record.decisions),
        "meta": _json_array(meta),
    })


def load_record(path: str) -> RunRecord:
    data = load_npz(path)
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    return RunRecord(
        controller=meta["controller"], seed=meta["seed"],
        clock0=meta["clock0"], horizon_s=meta["horizon_s"],
        train_ids=list(meta["train_ids"]),
        positions=data["positions"], stop_flags=data["stop_flags"],
        events=json.loads(bytes(data["events"]).decode("utf-8")),
        disruption_spans=[tuple(s) for s in meta["disruption_spans"]],
        deviation_samples=[tuple(x) for x in data["deviation_samples"].tolist()],
        block_entries=dict(meta["block_entries"]),
        arrived=meta["arrived"],
        final_conservation_error=meta["final_conservation_error"],
        scenario_fp=meta["scenario_fp"], config_fp=meta["config_fp"],
        decisions=json.loads(bytes(data["decisions"]).decode("utf-8")))
