"""Request/response models shared by the HTTP service and the CLI client.

All file references are paths on the machine running the operations, so the
service is a local tool server, not a file-upload API.
"""
from __future__ import annotations

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class SimulateRequest(BaseModel):
    route_path: str
    timetable_path: str
    od_path: Optional[str] = None
    scenario_path: str
    controller: str = "timetable"
    checkpoint_path: Optional[str] = None
    horizon_s: Optional[int] = Field(default=None, gt=0)
    seed: Optional[int] = None
    out_dir: str
    svg: bool = False


class SimulateResponse(BaseModel):
    out_dir: str
    record_path: str
    metrics_path: str
    timetable_path: str
    svg_path: Optional[str] = None
    metrics: dict
    arrived: int
    conservation_error: int
    wall_clock_s: float


class TrainRequest(BaseModel):
    config_path: str
    out_dir: str
    iterations: Optional[int] = Field(default=None, gt=0)
    seed: Optional[int] = None


class TrainResponse(BaseModel):
    checkpoint_path: str
    curve_path: str
    iterations: int
    total_steps: int
    final_mean_return: float
    wall_clock_s: float


class EvaluateRequest(BaseModel):
    checkpoint_path: Optional[str] = None
    config_path: Optional[str] = None
    n_seeds: int = Field(default=20, gt=0)
    base_seed: int = 0
    stochastic_passengers: bool = True
    out_path: Optional[str] = None


class EvaluateResponse(BaseModel):
    summary: dict
    per_seed: List[dict]
    out_path: Optional[str] = None


class RenderRequest(BaseModel):
    record_path: str
    route_path: str
    out_path: str
    width: int = Field(default=1100, gt=100)
    height: int = Field(default=560, gt=100)


class RenderResponse(BaseModel):
    out_path: str
    bytes_written: int


class CompareRequest(BaseModel):
    baseline_path: str
    candidate_path: str


class CompareResponse(BaseModel):
    baseline: dict
    candidate: dict
    delta_pct: Dict[str, Optional[float]]


class HealthResponse(BaseModel):
    status: str
    version: str
