"""FastAPI wiring around the operations module."""
from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from . import ops
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


def _run(fn, *args):
    try:
        return fn(*args)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="railsched", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return ops.health()

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest) -> SimulateResponse:
        return _run(ops.simulate, req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        return _run(ops.run_training, req)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        return _run(ops.run_evaluation, req)

    @app.post("/render", response_model=RenderResponse)
    def render(req: RenderRequest) -> RenderResponse:
        return _run(ops.render, req)

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest) -> CompareResponse:
        return _run(ops.compare, req)

    return app
