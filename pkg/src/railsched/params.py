"""Tunable constants for dynamics, operations and reward shaping."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict


@dataclass
class SimParams:
    accel_mps2: float = 0.8         # service acceleration
    brake_mps2: float = 1.0         # service braking
    lookahead_m: float = 5000.0     # movement-authority horizon
    dwell_s: int = 30               # minimum passenger-exchange stop
    reverse_s: int = 30             # cab-change time for a turnback
    route_lead_s: int = 60          # route requested this long before departure
    dt: float = 1.0                 # fixed step; the whole engine assumes 1 s

    def __post_init__(self):
        if self.accel_mps2 <= 0 or self.brake_mps2 <= 0:
            raise ValueError("acceleration and braking rates must be positive")
        if self.lookahead_m <= 0:
            raise ValueError("lookahead_m must be positive")
        if self.dwell_s < 0 or self.reverse_s < 0 or self.route_lead_s < 0:
            raise ValueError("time constants must be non-negative")
        if self.dt != 1.0:
            raise ValueError("engine is fixed at dt = 1 s")


@dataclass
class RewardWeights:
    """Linear reward: arrived·w_a + mean_speed·w_v − stop_s·w_s − excess·w_c − dev·w_d."""

    arrived: float = 1.0            # per passenger delivered
    speed: float = 0.0              # per mean m/s across running trains
    stoppage: float = 0.0           # per train-second stopped between stations
    congestion: float = 0.0         # per unit mean excess load factor
    deviation: float = 0.0          # per block of schedule deviation

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


# Throughput profile: deliveries dominate, interstation stops penalized.
PRESET_THROUGHPUT = RewardWeights(arrived=1.0, stoppage=0.01)
# Recovery profile: additionally pulls the line back toward the planned pattern.
PRESET_RECOVERY = RewardWeights(arrived=1.0, stoppage=0.01, deviation=0.1)

WEIGHT_PRESETS: Dict[str, RewardWeights] = {
    "throughput": PRESET_THROUGHPUT,
    "recovery": PRESET_RECOVERY,
}
