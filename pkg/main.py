from __future__ import annotations

import asyncio
import logging
import uuid
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.config import load_settings
from app.errors import ArtifactIOError, ConfigError, NumericalError
from app.models import (
    JobStartResponse,
    JobStatusResponse,
    RunConfig,
    RunListResponse,
    RunRecord,
    RunResponse,
    WorkflowRequest,
)
from app.storage import RunStore
from app.workflow import load_run_config, run_command

settings = load_settings()
Path(settings.output_dir).mkdir(parents=True, exist_ok=True)
logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
logger = logging.getLogger("bevalign-api")

app = FastAPI(title="BEV Alignment Service", version="1.0.0")
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

store = RunStore(settings.db_path)

JOBS: dict[str, dict[str, Any]] = {}
JOBS_LOCK = asyncio.Lock()
FINISHED_STATUSES = {"success", "failed"}


def _evict_finished_jobs(limit: int) -> None:
    """Drop the oldest finished jobs beyond ``limit``; caller holds JOBS_LOCK."""
    finished = [job_id for job_id, job in JOBS.items() if job["status"] in FINISHED_STATUSES]
    for job_id in finished[: max(0, len(finished) - limit)]:
        del JOBS[job_id]


async def _create_job(kind: str) -> str:
    job_id = f"{kind}-{uuid.uuid4().hex[:12]}"
    async with JOBS_LOCK:
        _evict_finished_jobs(settings.max_finished_jobs)
        JOBS[job_id] = {
            "job_id": job_id,
            "kind": kind,
            "status": "queued",
            "message": "Queued",
            "result": None,
            "error": None,
            "task": None,
        }
    return job_id


async def _set_job(job_id: str, **fields: Any) -> None:
    async with JOBS_LOCK:
        job = JOBS.get(job_id)
        if not job:
            return
        job.update(fields)


def _error_response(status_code: int, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=status_code, content={"detail": str(exc), "error_type": exc.__class__.__name__})


@app.exception_handler(ConfigError)
async def config_error_handler(request: Request, exc: ConfigError):
    logger.warning("Rejected %s %s: %s", request.method, request.url.path, exc)
    return _error_response(400, exc)


@app.exception_handler(ArtifactIOError)
async def artifact_error_handler(request: Request, exc: ArtifactIOError):
    missing = exc.path is not None and not Path(exc.path).exists()
    logger.warning("Artifact failure on %s %s: %s", request.method, request.url.path, exc)
    return _error_response(404 if missing else 500, exc)


@app.exception_handler(NumericalError)
async def numerical_error_handler(request: Request, exc: NumericalError):
    logger.error("Numerical failure on %s %s: %s", request.method, request.url.path, exc)
    return _error_response(500, exc)


@app.exception_handler(Exception)
async def unhandled_exception_handler(request: Request, exc: Exception):
    logger.exception("Unhandled server error on %s %s", request.method, request.url.path, exc_info=exc)
    return JSONResponse(
        status_code=500,
        content={
            "detail": "Internal server error",
            "error_type": exc.__class__.__name__,
        },
    )


def _config_for(payload: WorkflowRequest) -> RunConfig:
    return load_run_config(
        settings.default_config,
        overrides=payload.config,
        seed=payload.seed,
        out=payload.out or str(Path(settings.output_dir) / "default"),
        k_graph=payload.k_graph,
        sweep_k=payload.sweep_k,
        noise_rot_deg=payload.noise_rot_deg,
        noise_trans_m=payload.noise_trans_m,
        bev_shift_max=payload.bev_shift_max,
    )


def _run(command: str, payload: WorkflowRequest) -> RunResponse:
    config = _config_for(payload)
    run_id, summary = run_command(command, config, store)
    logger.info("Run finished command=%s run_id=%s out=%s", command, run_id, config.output_dir)
    return RunResponse(run_id=run_id, command=command, summary=summary)


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok"}


@app.post("/api/simulate", response_model=RunResponse)
def simulate(payload: WorkflowRequest) -> RunResponse:
    return _run("simulate", payload)


@app.post("/api/localalign/eval", response_model=RunResponse)
def localalign_eval(payload: WorkflowRequest) -> RunResponse:
    return _run("localalign-eval", payload)


@app.post("/api/globalalign/recover", response_model=RunResponse)
def globalalign_recover(payload: WorkflowRequest) -> RunResponse:
    return _run("globalalign-recover", payload)


@app.post("/api/bench", response_model=RunResponse)
def bench(payload: WorkflowRequest) -> RunResponse:
    return _run("bench", payload)


async def _run_recover_job(job_id: str, config: RunConfig) -> None:
    await _set_job(job_id, status="running", message="Optimizing offsets...")
    try:
        run_id, summary = await asyncio.to_thread(run_command, "globalalign-recover", config, store)
        await _set_job(
            job_id,
            status="success",
            message=f"Recovered shift for run {run_id}.",
            result={"run_id": run_id, "command": "globalalign-recover", "summary": summary},
            error=None,
        )
    except Exception as exc:
        logger.exception("Recover job failed. job_id=%s", job_id, exc_info=exc)
        await _set_job(job_id, status="failed", message="Offset recovery failed.", result=None, error=str(exc))


@app.post("/api/globalalign/recover/start", response_model=JobStartResponse)
async def globalalign_recover_start(payload: WorkflowRequest) -> JobStartResponse:
    config = _config_for(payload)
    job_id = await _create_job("recover")
    task = asyncio.create_task(_run_recover_job(job_id, config))
    await _set_job(job_id, task=task)
    return JobStartResponse(job_id=job_id, status="queued", message="Recovery job started.")


@app.get("/api/jobs/{job_id}", response_model=JobStatusResponse)
async def job_status(job_id: str) -> JobStatusResponse:
    async with JOBS_LOCK:
        job = JOBS.get(job_id)
        if not job:
            raise HTTPException(status_code=404, detail="Job not found.")
        return JobStatusResponse(
            job_id=job["job_id"],
            status=job["status"],
            message=job.get("message"),
            result=job.get("result"),
            error=job.get("error"),
        )


@app.get("/api/runs", response_model=RunListResponse)
def list_runs(command: str | None = None, limit: int = 50) -> RunListResponse:
    if limit < 1 or limit > 500:
        raise HTTPException(status_code=400, detail="limit must be between 1 and 500.")
    items = store.list_runs(command=command, limit=limit)
    return RunListResponse(total=len(items), items=items)


@app.get("/api/runs/{run_id}", response_model=RunRecord)
def get_run(run_id: str) -> RunRecord:
    record = store.get(run_id)
    if record is None:
        raise HTTPException(status_code=404, detail="Run not found.")
    return record


