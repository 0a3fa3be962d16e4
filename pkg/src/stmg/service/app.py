"""FastAPI application wrapping the service handlers."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="stmg", version=__version__)

    def _run(fn, req):
        try:
            return fn(req)
        except (ConfigError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/gendata", response_model=schemas.GendataResponse)
    def gendata(req: schemas.GendataRequest):
        return _run(handlers.gendata, req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return _run(handlers.train, req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return _run(handlers.evaluate, req)

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        return _run(handlers.simulate, req)

    @app.post("/plot", response_model=schemas.PlotResponse)
    def plot(req: schemas.PlotRequest):
        return _run(handlers.plot, req)

    return app
