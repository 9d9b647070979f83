"""Head-to-head evaluation: a trained policy against the plain timetable.

For every evaluation seed the episode draw (start second, blockage, onset,
duration, passenger stream) is made once, the policy plays it greedily, and
then the identical situation is rerun with no decision agent at all, so the
per-seed pairs differ only in control.  The summary reports the means and the
interstation-stop reduction that the pair comparison is usually about.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .driver import ResolvedStart, ServiceDriver
from .ppo import greedy_action, policy_forward, sample_action
from .sim_core import SimParams
from .rl_env import EpisodeConfig, RailEnv
from .timetable import extract_operation_rules


@dataclass
class SideResult:
    arrived: int
    stop_seconds: int
    stop_events: int
    episode_return: float

    def as_dict(self) -> dict:
        return {"arrived": self.arrived, "stop_seconds": self.stop_seconds,
                "stop_events": self.stop_events,
                "episode_return": self.episode_return}


def scenario_episode_config(model, timetable, od, scenario, *,
                            horizon_s: Optional[int] = None, seed: int = 0,
                            params=None,
                            stochastic_passengers: bool = False) -> EpisodeConfig:
    """Pin the episode draw to one concrete scenario.

    The domain windows collapse to single values, so every reset lands on the
    scenario's start state, blockage and timing; seeds then only vary
    passenger noise and policy sampling.
    """
    from .runner import resolved_start_from_payload

    if len(scenario.disruptions) > 1:
        raise ValueError("episode configs support at most one disruption")
    start = resolved_start_from_payload(scenario.start)

    def start_lookup(t0: int) -> ResolvedStart:
        if t0 != start.clock:
            raise ValueError(f"no resolved state for start {t0}")
        return start

    kw = dict(model=model, timetable=timetable, od=od,
              params=params if params is not None else SimParams(),
              start_lookup=start_lookup,
              start_window=(scenario.sim_start_s, scenario.sim_start_s),
              horizon_s=int(horizon_s if horizon_s is not None
                            else scenario.horizon_s),
              weights=scenario.weight_preset(), seed=seed,
              stochastic_passengers=stochastic_passengers)
    if scenario.disruptions:
        d = scenario.disruptions[0]
        onset = d.start_s - scenario.sim_start_s
        kw.update(disruption_choices=(tuple(d.blocks),),
                  onset_window=(onset, onset),
                  duration_range=(d.duration_s, d.duration_s))
    return EpisodeConfig(**kw)


def _policy_episode(env: RailEnv, params: Optional[dict], seed: int,
                    greedy: bool, rng: Optional[np.random.Generator]) -> SideResult:
    obs = env.reset(seed=seed)
    total = 0.0
    done = False
    while not done:
        if params is None:
            acts = [0] * env.n_points
        else:
            logits, _ = policy_forward(params, obs)
            if greedy:
                acts = greedy_action(logits)
            else:
                acts, _ = sample_action(logits, rng)
        obs, r, done, _ = env.step(acts)
        total += r
    tot = env.driver.totals
    return SideResult(arrived=env.driver.arrived(),
                      stop_seconds=int(tot.stop_seconds),
                      stop_events=int(tot.stop_events), episode_return=total)


def _baseline_episode(env: RailEnv) -> SideResult:
    """Replay the drawn episode with the timetable agent alone."""
    cfg = env.cfg
    start = cfg.start_lookup(env.sim_start)
    disruptions = [env.disruption] if env.disruption is not None else []
    rules = extract_operation_rules(cfg.model, cfg.timetable, cfg.params)
    driver = ServiceDriver(cfg.model, cfg.params, start, rules=rules,
                           od=cfg.od, seed=env.passenger_seed,
                           stochastic=cfg.stochastic_passengers,
                           disruptions=disruptions)
    driver.run(cfg.horizon_s)
    tot = driver.totals
    return SideResult(arrived=driver.arrived(),
                      stop_seconds=int(tot.stop_seconds),
                      stop_events=int(tot.stop_events), episode_return=0.0)


def evaluate_policy(cfg: EpisodeConfig, params: Optional[dict],
                    seeds: Sequence[int], *, greedy: bool = True,
                    baseline: bool = True) -> dict:
    """Run each seed with the policy (or all-proceed when ``params`` is
    None) and, optionally, the matching timetable-only baseline."""
    env = RailEnv(cfg)
    per_seed: List[dict] = []
    for seed in seeds:
        rng = np.random.Generator(np.random.PCG64(int(seed) + 777))
        pol = _policy_episode(env, params, int(seed), greedy, rng)
        row = {"seed": int(seed), "policy": pol.as_dict()}
        if baseline:
            row["baseline"] = _baseline_episode(env).as_dict()
        per_seed.append(row)

    def mean_of(side: str, key: str) -> float:
        return float(np.mean([r[side][key] for r in per_seed]))

    summary: Dict[str, float] = {
        "n_seeds": len(per_seed),
        "policy_arrived_mean": mean_of("policy", "arrived"),
        "policy_stop_seconds_mean": mean_of("policy", "stop_seconds"),
        "policy_stop_events_mean": mean_of("policy", "stop_events"),
        "policy_return_mean": mean_of("policy", "episode_return"),
    }
    if baseline:
        base_stop = mean_of("baseline", "stop_seconds")
        summary.update({
            "baseline_arrived_mean": mean_of("baseline", "arrived"),
            "baseline_stop_seconds_mean": base_stop,
            "baseline_stop_events_mean": mean_of("baseline", "stop_events"),
            "stop_reduction_pct": (100.0 * (1.0 - summary["policy_stop_seconds_mean"]
                                            / base_stop) if base_stop > 0 else 0.0),
            "arrived_delta_mean": (summary["policy_arrived_mean"]
                                   - mean_of("baseline", "arrived")),
        })
    return {"per_seed": per_seed, "summary": summary}
