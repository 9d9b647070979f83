"""Episodic decision environment over the running service.

One episode is a slice of the service day, usually with a randomized track
blockage.  Every ``decision_interval_s`` seconds the policy posts one macro
action (proceed / turn back, plus extra dwell) per decision point; the
rule-based executor turns those into signal and route commands while the
timetable agent keeps driving the rest of the line.  The reward is a weighted
linear sum of what happened in between: passengers delivered, mean speed,
interstation stop time, congestion, and deviation from the planned train
distribution.

The observation layout is fixed by the route model alone: features for every
potential decision point (not just the currently controlled ones) and for
every block, plus a handful of global disruption/time features, so one policy
network fits any assignment the scenario produces.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agents import (
    ACTION_PROCEED,
    ACTION_TURN_BACK,
    DWELL_BUCKETS,
    ControlAssignment,
    MacroAction,
    MacroPoint,
    all_macro_points,
    assign_control,
)
from .driver import ResolvedStart, ServiceDriver
from .params import PRESET_THROUGHPUT, RewardWeights, SimParams
from .passenger_flow import ODMatrix
from .route_model import DOWN, UP, RouteModel
from .sim_core import Disruption, EVENT_ARRIVE, TrainPhase
from .timetable import PlannedProfile, Timetable, extract_operation_rules

DELAY_CLIP_S = 1800.0
DAY_S = 86400.0

N_POINT_FEATURES = 4
N_BLOCK_FEATURES = 2
N_GLOBAL_FEATURES = 6
ACTIONS_PER_POINT = 2 * len(DWELL_BUCKETS)


def action_split(a: int) -> MacroAction:
    """Decode one categorical choice into (post, extra dwell)."""
    if not 0 <= a < ACTIONS_PER_POINT:
        raise ValueError(f"action index {a} out of range")
    post = ACTION_TURN_BACK if a >= len(DWELL_BUCKETS) else ACTION_PROCEED
    return MacroAction(post, DWELL_BUCKETS[a % len(DWELL_BUCKETS)])


def proceed_action_index(extra_dwell_s: int = 0) -> int:
    return DWELL_BUCKETS.index(extra_dwell_s)


def turn_back_action_index(extra_dwell_s: int = 0) -> int:
    return len(DWELL_BUCKETS) + DWELL_BUCKETS.index(extra_dwell_s)


# -- reward ------------------------------------------------------------------


@dataclass
class TransitionAggregates:
    """What happened between two decisions, in reward-relevant units."""
    arrived: int = 0                # passengers delivered to their destination
    mean_speed: float = 0.0         # train-mean velocity over the interval, m/s
    stop_seconds: int = 0           # train-seconds stopped between stations
    congestion: float = 0.0         # mean excess load factor over the interval
    deviation: float = 0.0          # planned-vs-actual block histogram distance


def compute_reward(agg: TransitionAggregates, w: RewardWeights) -> float:
    return (w.arrived * agg.arrived
            + w.speed * agg.mean_speed
            - w.stoppage * agg.stop_seconds
            - w.congestion * agg.congestion
            - w.deviation * agg.deviation)


# -- schedule deviation ------------------------------------------------------


class DeviationMeter:
    """Distance between where the plan puts the fleet and where it is.

    Both sides are per-block presence histograms over the service blocks
    (depot roads excluded); the metric is the L1 distance, minimized over a
    small clock window so punctuality-envelope jitter does not register.
    """

    def __init__(self, profile: PlannedProfile, window_s: int = 5):
        self.profile = profile
        self.model = profile.model
        self.window_s = window_s
        self.service_blocks = {
            b.id for b in self.model.blocks.values()
            if b.platform or b.succ(UP) or b.succ(DOWN)}
        self._cache: Dict[int, Dict[str, int]] = {}

    def _planned_hist(self, tau: int) -> Dict[str, int]:
        hist = self._cache.get(tau)
        if hist is None:
            if len(self._cache) > 256:
                self._cache.clear()
            hist = {}
            for train in self.profile.tt.by_train:
                b = self.profile.block_at(train, tau)
                if b is not None and b in self.service_blocks:
                    hist[b] = hist.get(b, 0) + 1
            self._cache[tau] = hist
        return hist

    def measure(self, state) -> int:
        actual: Dict[str, int] = {}
        for tr in state.running_trains():
            if tr.head_block in self.service_blocks:
                actual[tr.head_block] = actual.get(tr.head_block, 0) + 1
        t = state.clock
        best: Optional[int] = None
        for tau in range(t - self.window_s, t + self.window_s + 1):
            planned = self._planned_hist(tau)
            keys = set(planned) | set(actual)
            d = sum(abs(planned.get(k, 0) - actual.get(k, 0)) for k in keys)
            if best is None or d < best:
                best = d
                if best == 0:
                    break
        return int(best or 0)


# -- episode configuration ---------------------------------------------------


@dataclass
class EpisodeConfig:
    """Everything an episode needs, plus the randomization ranges.

    ``start_lookup`` resolves a wished start second into a concrete fleet
    state (positions, signals, locks); windows and ranges are inclusive
    integer-second bounds.  An empty ``disruption_choices`` means episodes
    run undisrupted.
    """
    model: RouteModel
    timetable: Timetable
    od: Optional[ODMatrix]
    params: SimParams
    start_lookup: Callable[[int], ResolvedStart]
    start_window: Tuple[int, int]
    disruption_choices: Sequence[Tuple[str, ...]] = ()
    onset_window: Tuple[int, int] = (180, 180)     # after sim start
    duration_range: Tuple[int, int] = (1800, 1800)
    horizon_s: int = 3600
    decision_interval_s: int = 60
    weights: RewardWeights = field(default_factory=lambda: PRESET_THROUGHPUT)
    seed: int = 0
    stochastic_passengers: bool = False

    def __post_init__(self):
        if self.horizon_s <= 0:
            raise ValueError("horizon_s must be positive")
        if self.decision_interval_s <= 0:
            raise ValueError("decision_interval_s must be positive")
        for name in ("start_window", "onset_window", "duration_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty: {(lo, hi)}")


def randomize_domain(cfg: EpisodeConfig, rng: np.random.Generator) -> Tuple[Disruption, int]:
    """Draw one scenario: (disruption, sim start second).

    Uniform over the configured block groups, onset window, duration range
    and start window; ends are inclusive so degenerate single-value ranges
    are allowed.
    """
    if not cfg.disruption_choices:
        raise ValueError("disruption_choices is empty")
    sim_start = int(rng.integers(cfg.start_window[0], cfg.start_window[1] + 1))
    blocks = cfg.disruption_choices[int(rng.integers(0, len(cfg.disruption_choices)))]
    onset = int(rng.integers(cfg.onset_window[0], cfg.onset_window[1] + 1))
    duration = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
    return Disruption(blocks=set(blocks), start_s=sim_start + onset,
                      duration_s=duration), sim_start


# -- the environment ---------------------------------------------------------


class RailEnv:
    """Fixed-layout observation, factored categorical actions, 1 s core."""

    def __init__(self, cfg: EpisodeConfig):
        self.cfg = cfg
        self.model = cfg.model
        self.points: List[MacroPoint] = all_macro_points(cfg.model)
        self.block_ids: List[str] = sorted(cfg.model.blocks)
        self.n_points = len(self.points)
        self.n_actions = ACTIONS_PER_POINT
        self.obs_dim = (N_POINT_FEATURES * self.n_points
                        + N_BLOCK_FEATURES * len(self.block_ids)
                        + N_GLOBAL_FEATURES)
        self._rules = extract_operation_rules(cfg.model, cfg.timetable, cfg.params)
        self._sched_arrivals: Dict[str, List[int]] = {
            train: [e.arrive_s for e in rows]
            for train, rows in cfg.timetable.by_train.items()}
        self._line_len = max(hi for _, hi in cfg.model.block_span.values())
        self._profile: Optional[PlannedProfile] = None
        self._meter: Optional[DeviationMeter] = None
        self._rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.driver: Optional[ServiceDriver] = None
        self.assignment: Optional[ControlAssignment] = None
        self.disruption: Optional[Disruption] = None
        self._end_clock = 0
        self._controlled: List[bool] = []
        self._arrive_count: Dict[str, int] = {}
        self._arrive_delay: Dict[str, float] = {}
        self.on_tick: Optional[Callable[[ServiceDriver, List[dict]], None]] = None

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.Generator(np.random.PCG64(seed))
        cfg = self.cfg
        if cfg.disruption_choices:
            self.disruption, sim_start = randomize_domain(cfg, self._rng)
            disruptions = [self.disruption]
        else:
            self.disruption = None
            sim_start = int(self._rng.integers(cfg.start_window[0],
                                               cfg.start_window[1] + 1))
            disruptions = []
        passenger_seed = int(self._rng.integers(0, 2**63))
        self.passenger_seed = passenger_seed
        self.sim_start = sim_start
        start = cfg.start_lookup(sim_start)
        self.assignment = assign_control(cfg.model, disruptions)
        self.driver = ServiceDriver(
            cfg.model, cfg.params, start, rules=self._rules,
            assignment=self.assignment, od=cfg.od, seed=passenger_seed,
            stochastic=cfg.stochastic_passengers, disruptions=disruptions)
        self._end_clock = start.clock + cfg.horizon_s
        controlled_keys = {p.key for p in self.assignment.macro_points}
        self._controlled = [p.key in controlled_keys for p in self.points]
        self._arrive_count = {}
        self._arrive_delay = {}
        return self._observe()

    def step(self, actions: Sequence[int]) -> Tuple[np.ndarray, float, bool, dict]:
        if self.driver is None:
            raise RuntimeError("reset() before step()")
        if len(actions) != self.n_points:
            raise ValueError(
                f"expected {self.n_points} actions, got {len(actions)}")
        driver = self.driver
        if driver.executor is not None:
            driver.executor.set_actions({
                p.key: action_split(int(a))
                for p, a, on in zip(self.points, actions, self._controlled) if on})
        before = driver.totals.copy()
        arrived_before = driver.arrived()
        refusals_before = driver.executor.refusals if driver.executor else 0

        horizon_left = self._end_clock - driver.clock
        span = min(self.cfg.decision_interval_s, max(horizon_left, 0))
        dev_sum, dev_n = 0.0, 0
        need_dev = self.cfg.weights.deviation != 0.0
        for k in range(span):
            events = driver.tick()
            self._note_arrivals(events)
            if self.on_tick is not None:
                self.on_tick(driver, events)
            if need_dev and (k % 5 == 4 or k == span - 1):
                dev_sum += self._deviation_meter().measure(driver.state)
                dev_n += 1

        after = driver.totals
        speed_samples = after.speed_samples - before.speed_samples
        agg = TransitionAggregates(
            arrived=driver.arrived() - arrived_before,
            mean_speed=((after.speed_sum - before.speed_sum) / speed_samples
                        if speed_samples else 0.0),
            stop_seconds=after.stop_seconds - before.stop_seconds,
            congestion=((after.congestion_sum - before.congestion_sum) / span
                        if span else 0.0),
            deviation=dev_sum / dev_n if dev_n else 0.0)
        reward = compute_reward(agg, self.cfg.weights)
        done = driver.clock >= self._end_clock
        info = {
            "aggregates": agg,
            "clock": driver.clock,
            "refusals": (driver.executor.refusals - refusals_before
                         if driver.executor else 0),
        }
        return self._observe(), reward, done, info

    # -- observation ---------------------------------------------------------

    def _deviation_meter(self) -> DeviationMeter:
        if self._meter is None:
            self._profile = PlannedProfile(self.model, self.cfg.timetable,
                                           self.cfg.params)
            self._meter = DeviationMeter(self._profile)
        return self._meter

    def _note_arrivals(self, events: List[dict]) -> None:
        for ev in events:
            if ev["kind"] != EVENT_ARRIVE:
                continue
            train = ev["train"]
            i = self._arrive_count.get(train, 0)
            self._arrive_count[train] = i + 1
            sched = self._sched_arrivals.get(train, [])
            if i < len(sched):
                delay = max(0.0, float(ev["t"] - sched[i]))
            else:
                delay = DELAY_CLIP_S  # off the plan entirely
            self._arrive_delay[train] = min(delay, DELAY_CLIP_S)

    def _observe(self) -> np.ndarray:
        state = self.driver.state
        world = self.driver.world
        obs = np.zeros(self.obs_dim, dtype=np.float64)
        at_point: Dict[Tuple[str, str], object] = {}
        for tr in state.running_trains():
            if tr.phase != TrainPhase.RUNNING:
                at_point[(tr.head_block, tr.direction)] = tr
        i = 0
        for p, on in zip(self.points, self._controlled):
            tr = at_point.get((p.platform_block, p.direction)) if on else None
            if tr is not None:
                obs[i] = 1.0
                obs[i + 1] = self._arrive_delay.get(tr.id, 0.0) / DELAY_CLIP_S
                if world is not None:
                    cap = self.model.stations[p.station].capacity
                    if cap:
                        obs[i + 2] = min(1.0, world.station_waiting(p.station) / cap)
                obs[i + 3] = min(1.0, tr.load_factor())
            i += N_POINT_FEATURES
        disrupted = state.active_disrupted_blocks()
        for b in self.block_ids:
            obs[i] = 1.0 if b in state.occupancy else 0.0
            obs[i + 1] = 1.0 if b in disrupted else 0.0
            i += N_BLOCK_FEATURES
        t = state.clock
        live = [d for d in state.disruptions if d.active(t)]
        if live:
            d = live[0]
            lo = min(self.model.block_span[b][0] for b in d.blocks)
            hi = max(self.model.block_span[b][1] for b in d.blocks)
            obs[i] = 1.0
            obs[i + 1] = 0.5 * (lo + hi) / self._line_len
            obs[i + 2] = min(1.0, (t - d.start_s) / DELAY_CLIP_S)
            obs[i + 3] = 1.0   # how long it will last is not observable
        obs[i + 4] = math.sin(2.0 * math.pi * t / DAY_S)
        obs[i + 5] = math.cos(2.0 * math.pi * t / DAY_S)
        return obs


# -- vectorized rollouts -----------------------------------------------------


def rollout_episode(env: RailEnv, policy_fn, seed: int,
                    max_decisions: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Run one seeded episode; ``policy_fn(obs, rng) -> (actions, logp, value)``.

    Returns aligned step arrays plus the bootstrap observation and terminal
    flag the advantage estimator needs.
    """
    chain = np.random.Generator(np.random.PCG64(seed))
    env_seed = int(chain.integers(0, 2**63))
    act_rng = np.random.Generator(np.random.PCG64(int(chain.integers(0, 2**63))))
    obs = env.reset(seed=env_seed)
    obs_l, act_l, logp_l, rew_l, val_l, done_l = [], [], [], [], [], []
    done = False
    steps = 0
    while not done and (max_decisions is None or steps < max_decisions):
        actions, logp, value = policy_fn(obs, act_rng)
        nxt, reward, done, _ = env.step(actions)
        obs_l.append(obs)
        act_l.append(np.asarray(actions, dtype=np.int64))
        logp_l.append(logp)
        rew_l.append(reward)
        val_l.append(value)
        done_l.append(done)
        obs = nxt
        steps += 1
    return {
        "obs": np.asarray(obs_l, dtype=np.float64),
        "actions": np.asarray(act_l, dtype=np.int64),
        "logp": np.asarray(logp_l, dtype=np.float64),
        "rewards": np.asarray(rew_l, dtype=np.float64),
        "values": np.asarray(val_l, dtype=np.float64),
        "dones": np.asarray(done_l, dtype=bool),
        "final_obs": obs,
        "seed": np.int64(seed),
    }


def vector_rollout(make_env: Optional[Callable[[], RailEnv]], policy_fn,
                   seeds: Sequence[int], max_decisions: Optional[int] = None,
                   parallel: bool = True,
                   envs: Optional[Sequence[RailEnv]] = None) -> List[Dict[str, np.ndarray]]:
    """Independent seeded episodes, one env instance per seed.

    Instances share nothing mutable, so running them on worker threads gives
    the same trajectories as running them one after another.  Pass ``envs``
    to reuse instances across calls instead of rebuilding them.
    """
    if envs is None:
        envs = [make_env() for _ in seeds]
    if len(envs) != len(seeds):
        raise ValueError("need exactly one env per seed")

    def one(pair: Tuple[RailEnv, int]) -> Dict[str, np.ndarray]:
        env, seed = pair
        return rollout_episode(env, policy_fn, seed, max_decisions)

    pairs = list(zip(envs, seeds))
    if not parallel or len(pairs) <= 1:
        return [one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=min(len(pairs), 8)) as pool:
        return list(pool.map(one, pairs))
