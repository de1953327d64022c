from __future__ import annotations

import logging
from contextlib import asynccontextmanager
from dataclasses import asdict
from typing import Dict, List

from fastapi import FastAPI, HTTPException
from pydantic import ValidationError

from app.config import VARIANT_FREQUENCY_HZ, ConfigError, default_workload, list_presets, load_preset
from app.evaluation import ExpectationChecker, ExpectationSchemaError
from app.metrics import MetricsReport
from app.models import CheckRequest, RunRequest
from app.runner import RUNNABLE, RunSettings, run_kernel
from app.sim.cluster import DeadlockError
from app.utils import now_iso_utc

logger = logging.getLogger(__name__)

# runs served since startup, newest last
run_history: List[Dict[str, object]] = []


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("[startup] %d presets available", len(list_presets()))
    yield


app = FastAPI(title="Shared-L1 Cluster Simulator", version="0.1.0", lifespan=lifespan)


@app.get("/api/presets")
def get_presets():
    return {"presets": list_presets(), "kernels": list(RUNNABLE)}


@app.get("/api/presets/{name}")
def get_preset(name: str):
    try:
        cfg = load_preset(name)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))
    return cfg.model_dump()


@app.post("/api/runs")
def create_run(req: RunRequest):
    """Run one kernel synchronously and return its metrics report."""
    if req.kernel == "program":
        raise HTTPException(status_code=400, detail="program runs are only available from the command line")
    try:
        cfg = load_preset(req.preset)
        if req.variant is not None:
            cfg = cfg.with_variant(req.variant, VARIANT_FREQUENCY_HZ.get(req.variant))
        w = default_workload(cfg, **req.workload)
        settings = RunSettings(seed=req.seed, double_buffer=req.double_buffer, memory=req.memory)
        outcome = run_kernel(req.kernel, cfg, w, settings)
    except (ConfigError, ValidationError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except DeadlockError as e:
        raise HTTPException(status_code=422, detail=f"deadlock at cycle {e.cycle}")
    run_history.append(
        {"kernel": req.kernel, "preset": req.preset, "cycles": outcome.report.cycles, "finished_at": now_iso_utc()}
    )
    return {
        "passed": outcome.passed,
        "notes": outcome.notes,
        "regions": [asdict(c) for c in outcome.verification.checks] if outcome.verification else [],
        "report": outcome.report.model_dump(mode="json", by_alias=True),
    }


@app.post("/api/check")
def check_report(req: CheckRequest):
    try:
        report = MetricsReport.model_validate(req.report)
    except ValidationError as e:
        raise HTTPException(status_code=422, detail=f"not a metrics report: {e.errors()[0]['msg']}")
    try:
        checker = ExpectationChecker.from_source(req.expectations)
    except ExpectationSchemaError as e:
        raise HTTPException(status_code=422, detail=str(e))
    result = checker.check(report)
    return {"passed": result.passed, "outcomes": [asdict(o) for o in result.outcomes]}


@app.get("/api/runs")
def list_runs():
    return {"runs": run_history}
