"""HTTP backend: upload an image, run the pipeline, fetch the results.

Jobs are asynchronous by default (upload returns an id immediately, results
arrive via polling) with an in-memory store and a TTL instead of a
database; a synchronous mode exists for tests. A completed job's
detections document is field-for-field identical to what the CLI produces
for the same image, configuration, detector, and seed.
"""

from __future__ import annotations

import hashlib
import io
import time
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .detector import Detector, raster_digest
from .geometry import Detection, NmsConfig
from .pipeline import PipelineConfig, detections_document, run_pipeline
from .render import draw_detections
from .tiling import TileGridSpec

DEFAULT_SIZE_CAP = 20 * 1024 * 1024
DEFAULT_TTL_SECONDS = 3600.0


@dataclass
class Job:
    job_id: str
    state: str  # queued -> processing -> done | failed
    created: float
    config: PipelineConfig
    seed: int
    raster: np.ndarray | None = None
    width: int = 0
    height: int = 0
    image_key: str = ""
    detections: list[Detection] | None = None
    error: str | None = None


class JobStore:
    """In-memory job records with exclusive state transitions and a TTL."""

    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS) -> None:
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self.ttl_seconds = ttl_seconds

    def create(self, job: Job) -> None:
        with self._lock:
            self._purge()
            self._jobs[job.job_id] = job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            self._purge()
            return self._jobs.get(job_id)

    def transition(self, job_id: str, state: str, **updates) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                return
            job.state = state
            for key, value in updates.items():
                setattr(job, key, value)

    def _purge(self) -> None:
        now = time.monotonic()
        expired = [
            k
            for k, job in self._jobs.items()
            if job.state in ("done", "failed") and now - job.created > self.ttl_seconds
        ]
        for k in expired:
            del self._jobs[k]


def _parse_overrides(request: Request, base: PipelineConfig, default_seed: int):
    """Apply tiling/grid/overlap/nms/seed query parameters to the base config."""
    params = request.query_params
    cfg = base
    tiling = params.get("tiling")
    if tiling is not None:
        if tiling not in ("on", "off"):
            raise ValueError(f"tiling must be 'on' or 'off', got {tiling!r}")
        cfg = replace(cfg, tiling_enabled=tiling == "on")
    grid = params.get("grid")
    overlap = params.get("overlap")
    if grid is not None or overlap is not None:
        n_cols, n_rows = cfg.grid.n_cols, cfg.grid.n_rows
        if grid is not None:
            try:
                cols_s, rows_s = grid.lower().split("x")
                n_cols, n_rows = int(cols_s), int(rows_s)
            except ValueError:
                raise ValueError(f"grid must look like '5x5', got {grid!r}") from None
        frac = cfg.grid.overlap
        if overlap is not None:
            try:
                frac = float(overlap)
            except ValueError:
                raise ValueError(f"overlap must be a number, got {overlap!r}") from None
        cfg = replace(cfg, grid=TileGridSpec(n_cols, n_rows, frac))
    nms_threshold = params.get("nms")
    if nms_threshold is not None:
        try:
            value = float(nms_threshold)
        except ValueError:
            raise ValueError(f"nms must be a number, got {nms_threshold!r}") from None
        cfg = replace(cfg, nms=NmsConfig(value, cfg.nms.class_aware))
    seed = default_seed
    if params.get("seed") is not None:
        try:
            seed = int(params["seed"])
        except ValueError:
            raise ValueError(f"seed must be an integer, got {params['seed']!r}") from None
    return cfg, seed


def create_app(
    detector: Detector,
    categories: list[str],
    base_config: PipelineConfig | None = None,
    *,
    seed: int = 0,
    synchronous: bool = False,
    max_workers: int = 4,
    size_cap: int = DEFAULT_SIZE_CAP,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
    filter_file_hash: str | None = None,
) -> FastAPI:
    app = FastAPI(title="tiledet")
    store = JobStore(ttl_seconds)
    executor = ThreadPoolExecutor(max_workers=max_workers)
    started = time.monotonic()
    base = base_config if base_config is not None else PipelineConfig()

    def _execute(job_id: str) -> None:
        job = store.get(job_id)
        if job is None:
            return
        store.transition(job_id, "processing")
        try:
            detections = run_pipeline(job.raster, detector, job.config, job.seed)
        except Exception as exc:
            store.transition(job_id, "failed", error=str(exc))
            return
        store.transition(job_id, "done", detections=detections)

    @app.post("/api/v1/images")
    async def upload(request: Request):
        body = await request.body()
        if len(body) > size_cap:
            return JSONResponse(
                {"error": f"payload of {len(body)} bytes exceeds the {size_cap} byte cap"},
                status_code=413,
            )
        try:
            with Image.open(io.BytesIO(body)) as img:
                if img.format not in ("PNG", "JPEG"):
                    raise UnidentifiedImageError(f"unsupported format {img.format}")
                raster = np.asarray(img.convert("RGB"))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            return JSONResponse(
                {"error": f"body is not a decodable PNG or JPEG image: {exc}"},
                status_code=415,
            )
        try:
            cfg, job_seed = _parse_overrides(request, base, seed)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)

        job = Job(
            job_id=uuid.uuid4().hex,
            state="queued",
            created=time.monotonic(),
            config=cfg,
            seed=job_seed,
            raster=raster,
            width=raster.shape[1],
            height=raster.shape[0],
            image_key=raster_digest(raster),
        )
        store.create(job)
        if synchronous:
            _execute(job.job_id)
        else:
            executor.submit(_execute, job.job_id)
        return {"job_id": job.job_id}

    @app.get("/api/v1/results/{job_id}")
    def results(job_id: str):
        job = store.get(job_id)
        if job is None:
            return JSONResponse({"error": f"unknown job id {job_id!r}"}, status_code=404)
        if job.state == "failed":
            return {"state": "failed", "error": job.error}
        if job.state != "done":
            return {"state": job.state}
        doc = detections_document(
            job.image_key, job.width, job.height, job.config, job.detections, categories
        )
        return {"state": "done", **doc}

    @app.get("/api/v1/results/{job_id}/annotated")
    def annotated(job_id: str):
        job = store.get(job_id)
        if job is None:
            return JSONResponse({"error": f"unknown job id {job_id!r}"}, status_code=404)
        if job.state == "failed":
            return JSONResponse({"error": job.error}, status_code=500)
        if job.state != "done":
            return JSONResponse(
                {"error": f"job {job_id} is not ready (state {job.state})"}, status_code=409
            )
        rendered = draw_detections(job.raster, job.detections, categories)
        buf = io.BytesIO()
        Image.fromarray(rendered, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "detector": detector.kind,
            "filter_fingerprint": filter_file_hash,
            "uptime_seconds": time.monotonic() - started,
        }

    return app


def file_sha256(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()
