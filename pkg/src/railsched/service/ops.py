"""The five operations behind both the CLI and the HTTP endpoints.

Each takes a request model, does file IO plus the core work, and returns a
response model.  Invalid inputs raise ValueError (bad content) or
FileNotFoundError; the HTTP layer maps those to status codes and the CLI to
exit codes.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from typing import List, Optional

import numpy as np
import yaml

from .. import __version__
from ..evaluation import evaluate_policy
from ..ppo import PpoConfig, load_checkpoint, train
from ..render_svg import render_time_space_svg
from ..route_model import load_route_model
from ..runner import (
    RunRecord,
    compare_records,
    compute_metrics,
    load_record,
    realized_timetable,
    run_scenario,
    save_record,
)
from ..storage import dumps_jsonl, write_atomic
from ..timetable import serialize_timetable_csv
from .schemas import (
    CompareRequest,
    CompareResponse,
    EvaluateRequest,
    EvaluateResponse,
    HealthResponse,
    RenderRequest,
    RenderResponse,
    SimulateRequest,
    SimulateResponse,
    TrainRequest,
    TrainResponse,
)


def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


# -- simulate ----------------------------------------------------------------


def metrics_lines(record: RunRecord) -> List[dict]:
    """Line-delimited metric records, in a fixed order."""
    m = compute_metrics(record)
    lines = [
        {"metric": "arrived", "value": m.arrived},
        {"metric": "stop_seconds", "value": m.stop_seconds},
        {"metric": "stop_events", "value": m.stop_events},
        {"metric": "mean_deviation", "value": round(m.mean_deviation, 6)},
        {"metric": "conservation_error", "value": record.final_conservation_error},
    ]
    for block, tph in sorted(m.trains_per_hour.items()):
        lines.append({"metric": "trains_per_hour", "block": block,
                      "value": round(tph, 6)})
    return lines


def simulate(req: SimulateRequest) -> SimulateResponse:
    record = run_scenario(req.route_path, req.timetable_path, req.od_path,
                          req.scenario_path, controller=req.controller,
                          checkpoint_path=req.checkpoint_path,
                          horizon_s=req.horizon_s, seed=req.seed)
    model = load_route_model(req.route_path)
    os.makedirs(req.out_dir, exist_ok=True)

    record_path = os.path.join(req.out_dir, "record.npz")
    metrics_path = os.path.join(req.out_dir, "metrics.jsonl")
    tt_path = os.path.join(req.out_dir, "realized_timetable.csv")
    save_record(record_path, record)
    write_atomic(metrics_path, dumps_jsonl(metrics_lines(record)))
    write_atomic(tt_path, serialize_timetable_csv(realized_timetable(record, model)))

    svg_path = None
    if req.svg:
        svg_path = os.path.join(req.out_dir, "run.svg")
        write_atomic(svg_path, render_time_space_svg(record, model))

    m = compute_metrics(record)
    return SimulateResponse(
        out_dir=req.out_dir, record_path=record_path,
        metrics_path=metrics_path, timetable_path=tt_path, svg_path=svg_path,
        metrics=m.as_dict(), arrived=record.arrived,
        conservation_error=record.final_conservation_error,
        wall_clock_s=record.wall_clock_s)


# -- train -------------------------------------------------------------------


def _episode_from_config(doc: dict, seed: int):
    from ..fixtures import episode_config, toy_episode_config

    episode_doc = dict(doc.get("episode", {}))
    preset = episode_doc.pop("preset", "service")
    if preset == "toy":
        if episode_doc:
            raise ValueError("the toy preset takes no episode overrides")
        return toy_episode_config(seed=seed)
    if preset != "service":
        raise ValueError(f"unknown episode preset {preset!r}")
    for key in ("start_window", "onset_window", "duration_range"):
        if key in episode_doc:
            episode_doc[key] = tuple(episode_doc[key])
    if "disruption_choices" in episode_doc:
        episode_doc["disruption_choices"] = tuple(
            tuple(group) for group in episode_doc["disruption_choices"])
    return episode_config(seed=seed, **episode_doc)


def run_training(req: TrainRequest, log=None) -> TrainResponse:
    from ..rl_env import RailEnv

    with open(req.config_path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    ppo_doc = dict(doc.get("ppo", {}))
    if req.iterations is not None:
        ppo_doc["iterations"] = req.iterations
    if req.seed is not None:
        ppo_doc["seed"] = req.seed
    cfg = PpoConfig(**ppo_doc)
    ecfg = _episode_from_config(doc, cfg.seed)

    os.makedirs(req.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(req.out_dir, "checkpoint.npz")
    curve_path = os.path.join(req.out_dir, "curve.jsonl")
    t0 = time.monotonic()
    _, curve = train(cfg, lambda: RailEnv(ecfg),
                     checkpoint_path=checkpoint_path, curve_path=curve_path,
                     log=log)
    last = curve[-1] if curve else {"steps": 0, "mean_return": 0.0}
    return TrainResponse(
        checkpoint_path=checkpoint_path, curve_path=curve_path,
        iterations=len(curve), total_steps=int(last["steps"]),
        final_mean_return=float(last["mean_return"]),
        wall_clock_s=time.monotonic() - t0)


# -- evaluate ----------------------------------------------------------------


def run_evaluation(req: EvaluateRequest) -> EvaluateResponse:
    from dataclasses import replace

    params = load_checkpoint(req.checkpoint_path) if req.checkpoint_path else None
    if req.config_path:
        with open(req.config_path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        ecfg = _episode_from_config(doc, req.base_seed)
    else:
        from ..fixtures import episode_config
        ecfg = _episode_from_config({}, req.base_seed)
    ecfg = replace(ecfg, stochastic_passengers=req.stochastic_passengers)

    seeds = [req.base_seed + i for i in range(req.n_seeds)]
    result = evaluate_policy(ecfg, params, seeds)
    out_path = None
    if req.out_path:
        lines = list(result["per_seed"])
        lines.append({"summary": result["summary"]})
        write_atomic(req.out_path, dumps_jsonl(lines))
        out_path = req.out_path
    return EvaluateResponse(summary=result["summary"],
                            per_seed=result["per_seed"], out_path=out_path)


# -- render / compare --------------------------------------------------------


def render(req: RenderRequest) -> RenderResponse:
    record = load_record(req.record_path)
    model = load_route_model(req.route_path)
    svg = render_time_space_svg(record, model, width=req.width,
                                height=req.height)
    write_atomic(req.out_path, svg)
    return RenderResponse(out_path=req.out_path,
                          bytes_written=len(svg.encode("utf-8")))


def compare(req: CompareRequest) -> CompareResponse:
    baseline = load_record(req.baseline_path)
    candidate = load_record(req.candidate_path)
    result = compare_records(baseline, candidate)
    return CompareResponse(**result)
