"""HTTP service exposing the solver; the CLI talks to the same handlers."""
import math
from typing import List, Optional, Tuple

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import runner
from .config import ConfigError, RunConfig


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _clean(row):
    return {k: (_num(v) if isinstance(v, float) else v) for k, v in row.items()}


class SolveResponse(BaseModel):
    points: List[Tuple[float, float]]
    values: List[Optional[float]]
    valid: List[bool]
    stderr: List[Optional[float]]
    gradient: Optional[List[Tuple[Optional[float], Optional[float]]]] = None
    rmse: Optional[float] = None
    report: List[dict]
    files: List[str]


class ConvergeResponse(BaseModel):
    rows: List[dict]
    slope: Optional[float]
    files: List[str]


class PolylineModel(BaseModel):
    seed: Tuple[float, float]
    points: List[Tuple[float, float]]
    reason: str


class StreamlinesResponse(BaseModel):
    polylines: List[PolylineModel]
    files: List[str]


class AblateResponse(BaseModel):
    rows: List[dict]
    files: List[str]


class OracleResponse(BaseModel):
    points: List[Tuple[float, float]]
    values: List[Optional[float]]
    valid: List[bool]
    files: List[str]


def handle_solve(cfg: RunConfig) -> SolveResponse:
    res = runner.run_solve(cfg)
    grad = None
    if res.gradient is not None:
        grad = [(_num(a), _num(b)) for a, b in res.gradient]
    return SolveResponse(points=res.points.tolist(), values=[_num(v) for v in res.values],
                         valid=res.valid.tolist(), stderr=[_num(v) for v in res.stderr],
                         gradient=grad, rmse=res.rmse, report=[_clean(r) for r in res.report],
                         files=res.files)


def handle_converge(cfg: RunConfig) -> ConvergeResponse:
    rows, slope, files = runner.run_convergence(cfg)
    return ConvergeResponse(rows=[_clean(r) for r in rows], slope=_num(slope), files=files)


def handle_streamlines(cfg: RunConfig) -> StreamlinesResponse:
    lines, files = runner.trace_streamlines(cfg)
    return StreamlinesResponse(
        polylines=[PolylineModel(seed=p.seed, points=p.points, reason=p.reason) for p in lines],
        files=files)


def handle_ablate(cfg: RunConfig) -> AblateResponse:
    rows, files = runner.run_ablation(cfg)
    return AblateResponse(rows=[_clean(r) for r in rows], files=files)


def handle_oracle(cfg: RunConfig) -> OracleResponse:
    pts, values, valid, files = runner.run_oracle(cfg)
    return OracleResponse(points=pts.tolist(), values=[_num(v) for v in values],
                          valid=valid.tolist(), files=files)


HANDLERS = {
    "solve": handle_solve,
    "converge": handle_converge,
    "streamlines": handle_streamlines,
    "ablate": handle_ablate,
    "oracle": handle_oracle,
}

app = FastAPI(title="bvcache")


@app.exception_handler(ConfigError)
async def _config_error(request, exc):
    return JSONResponse(status_code=422, content={"detail": str(exc), "kind": "config"})


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/solve", response_model=SolveResponse)
def solve(cfg: RunConfig):
    return _run("solve", cfg)


@app.post("/converge", response_model=ConvergeResponse)
def converge(cfg: RunConfig):
    return _run("converge", cfg)


@app.post("/streamlines", response_model=StreamlinesResponse)
def streamlines(cfg: RunConfig):
    return _run("streamlines", cfg)


@app.post("/ablate", response_model=AblateResponse)
def ablate(cfg: RunConfig):
    return _run("ablate", cfg)


@app.post("/oracle", response_model=OracleResponse)
def oracle(cfg: RunConfig):
    return _run("oracle", cfg)


def _run(command, cfg):
    try:
        return HANDLERS[command](cfg)
    except ConfigError:
        raise
    except Exception as exc:
        raise HTTPException(status_code=500, detail=f"{type(exc).__name__}: {exc}") from exc
