"""One object that runs a whole service: simulator, passengers, agents.

``ServiceDriver`` owns the per-second loop.  Each tick it collects commands
from the timetable agent (and the rule-based executor when a span of the line
is under direct control), advances the simulator, routes the resulting events
into the passenger world, generates new demand, and keeps running totals of
the quantities every caller wants afterwards: interstation stop time, mean
speed, congestion, arrivals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .agents import ControlAssignment, RuleBasedExecutor, TimetableAgent
from .params import SimParams
from .passenger_flow import ODMatrix, PassengerWorld
from .route_model import RouteModel
from .sim_core import (
    EVENT_ABSORBED,
    EVENT_ARRIVE,
    EVENT_DEPART,
    EVENT_REVERSE,
    EVENT_STOP_BEGIN,
    Disruption,
    Placement,
    SimState,
    init_sim,
    step,
)
from .timetable import TimedCommand


@dataclass
class ResolvedStart:
    """Mid-plan initial condition: where everything stands at one second."""
    clock: int
    placements: List[Placement]
    signals: Dict[str, str] = field(default_factory=dict)
    locks: Dict[str, Tuple[str, bool]] = field(default_factory=dict)


@dataclass
class RunningTotals:
    seconds: int = 0
    stop_seconds: int = 0
    stop_events: int = 0
    speed_sum: float = 0.0
    speed_samples: int = 0
    congestion_sum: float = 0.0

    def copy(self) -> "RunningTotals":
        return RunningTotals(self.seconds, self.stop_seconds, self.stop_events,
                             self.speed_sum, self.speed_samples,
                             self.congestion_sum)


class ServiceDriver:
    def __init__(self, model: RouteModel, params: SimParams, start: ResolvedStart,
                 rules: Sequence[TimedCommand] = (),
                 assignment: Optional[ControlAssignment] = None,
                 od: Optional[ODMatrix] = None, seed: int = 0,
                 stochastic: bool = False,
                 disruptions: Sequence[Disruption] = ()):
        self.model = model
        self.params = params
        self.state = init_sim(model, start.placements, params,
                              signals=dict(start.signals),
                              locks=dict(start.locks), clock=start.clock)
        self.state.disruptions.extend(disruptions)
        self.agent = TimetableAgent(rules, assignment)
        self.executor = (RuleBasedExecutor(model, assignment, params)
                         if assignment is not None and assignment.controlled
                         else None)
        self.world = (PassengerWorld(model, od, seed=seed, stochastic=stochastic)
                      if od is not None else None)
        self.totals = RunningTotals()

    # -- stepping ------------------------------------------------------------

    def tick(self, per_second_hook=None) -> List[dict]:
        """Advance one second; returns the second's events."""
        commands = list(self.agent.commands(self.state))
        if self.executor is not None:
            commands.extend(self.executor.commands(self.state))
        events = step(self.state, commands, per_second_hook)
        if self.world is not None:
            self._exchange(events)
            self.world.generate_arrivals(self.state.clock)
        self._accumulate(events)
        return events

    def run(self, seconds: int, per_second_hook=None) -> None:
        for _ in range(seconds):
            self.tick(per_second_hook)

    def _exchange(self, events: List[dict]) -> None:
        world = self.world
        for ev in events:
            train = self.state.trains.get(ev["train"] or "")
            if train is None:
                continue
            kind = ev["kind"]
            if kind in (EVENT_ARRIVE, EVENT_DEPART) and ev["station"]:
                world.exchange_at_platform(train, ev["station"])
            elif kind == EVENT_REVERSE:
                hit = self.model.station_of_platform_block(train.head_block)
                if hit:
                    world.rebalance_after_reversal(train, hit[0])
            elif kind == EVENT_ABSORBED and ev["station"]:
                world.evacuate(train, ev["station"])

    def _accumulate(self, events: List[dict]) -> None:
        t = self.totals
        t.seconds += 1
        running = self.state.running_trains()
        for tr in running:
            if tr.in_interstation_stop:
                t.stop_seconds += 1
            t.speed_sum += tr.velocity
            t.speed_samples += 1
        t.stop_events += sum(1 for ev in events if ev["kind"] == EVENT_STOP_BEGIN)
        if self.world is not None:
            t.congestion_sum += self.world.congestion_excess(running)

    # -- queries -------------------------------------------------------------

    @property
    def clock(self) -> int:
        return self.state.clock

    def arrived(self) -> int:
        return self.world.arrived if self.world is not None else 0

    def conservation_error(self) -> int:
        if self.world is None:
            return 0
        return self.world.conservation_error(self.state.trains.values())

    def positions(self) -> Dict[str, Optional[float]]:
        """Line coordinate of each train's head; None once absorbed."""
        out: Dict[str, Optional[float]] = {}
        for tid, tr in self.state.trains.items():
            if tr.absorbed:
                out[tid] = None
            else:
                out[tid] = self.model.line_position(tr.head_block, tr.head_offset,
                                                    tr.direction)
        return out
