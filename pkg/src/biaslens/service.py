"""HTTP/JSON service exposing a trained checkpoint to the web demo.

The model snapshot is loaded once and never mutated; every handler is a
pure function over it, so concurrent requests need no synchronization.
Images cross the wire as base64 PNG. See API.md for the full surface.
"""

from __future__ import annotations

import base64

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import data as datamod
from .errors import BiasLensError, NonFiniteError, UnknownDatasetError
from .imaging import pixels_to_png, png_to_pixels
from .metrics import BiasReport, build_report
from .transfer import Pipeline

MAX_IMAGE_BYTES = 4 * 1024 * 1024
MAX_COUNT = 64


class DatasetInfo(BaseModel):
    id: int
    name: str
    style: dict
    description: str


class DatasetsResponse(BaseModel):
    datasets: list[DatasetInfo]


class SamplesResponse(BaseModel):
    dataset: str
    seed: int
    indices: list[int]
    images: list[str]


class SampleRef(BaseModel):
    dataset: str
    seed: int
    index: int = Field(ge=0)


class ProjectRequest(BaseModel):
    image: str | None = None  # base64 PNG
    sample_ref: SampleRef | None = None
    from_: str = Field(alias="from")
    to: str

    model_config = {"populate_by_name": True}


class ZStats(BaseModel):
    dim: int
    norm: float
    mean: float
    std: float
    min: float
    max: float


class ProjectResponse(BaseModel):
    source: str
    reconstruction: str
    projection: str
    z_stats: ZStats


class SampleRequest(BaseModel):
    dataset: str
    count: int = Field(default=9, ge=1, le=MAX_COUNT)
    seed: int = 0


class SampleResponse(BaseModel):
    dataset: str
    seed: int
    images: list[str]


def _b64_png(pixels: np.ndarray) -> str:
    return base64.b64encode(pixels_to_png(pixels)).decode("ascii")


def render_real_samples(pipeline: Pipeline, dataset: str, seed: int, count: int) -> np.ndarray:
    """Re-render `count` ground-truth observations of a registered dataset.

    Uses the same per-sample streams as corpus generation, so (dataset,
    seed, index) is a stable address for one specific image.
    """
    spec = pipeline.registry[pipeline.label(dataset)]
    rows = [datamod.make_observation(spec, seed, i)[0] for i in range(count)]
    return np.stack(rows)


def compute_service_report(pipeline: Pipeline, data_dir: str | None) -> BiasReport:
    """The report served at /api/report; identical to `bias-lens eval` output
    when pointed at the same data directory."""
    cfg = pipeline.config
    if data_dir is not None:
        _, union = datamod.load_family(data_dir)
    else:
        data_seed = pipeline.ckpt.metrics.get("data_seed")
        if data_seed is None:
            raise BiasLensError("checkpoint lacks data_seed; pass a data directory for the report")
        sets = [datamod.generate_dataset(spec, int(data_seed)) for spec in pipeline.registry]
        union = datamod.SampleSet(
            np.concatenate([s.pixels for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.content for s in sets]),
        )
    _, val = datamod.split(union, cfg.split_ratio, cfg.seed)
    return build_report(pipeline, val, seed=cfg.seed)


def create_app(
    pipeline: Pipeline,
    report: BiasReport | None = None,
    data_dir: str | None = None,
    ui_dir: str | None = None,
) -> FastAPI:
    app = FastAPI(title="bias-lens", version="0.1.0")
    # The report is deterministic, so the lazy memo below is idempotent; the
    # CLI precomputes it anyway so request handlers stay read-only in practice.
    state = {"report": report}

    @app.exception_handler(RequestValidationError)
    async def bad_request(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.exception_handler(UnknownDatasetError)
    async def unknown_dataset(_req: Request, exc: UnknownDatasetError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NonFiniteError)
    async def numeric_failure(_req: Request, exc: NonFiniteError):
        return JSONResponse(status_code=500, content={"detail": f"numeric failure: {exc}"})

    @app.get("/api/datasets", response_model=DatasetsResponse)
    def datasets():
        infos = [
            DatasetInfo(id=s.id, name=s.name, style=s.style.to_dict(), description=s.style.describe())
            for s in pipeline.registry
        ]
        return DatasetsResponse(datasets=infos)

    @app.get("/api/samples", response_model=SamplesResponse)
    def samples(dataset: str, count: int = Query(default=9, ge=1, le=MAX_COUNT), seed: int = 0):
        pixels = render_real_samples(pipeline, dataset, seed, count)
        return SamplesResponse(
            dataset=dataset, seed=seed, indices=list(range(count)), images=[_b64_png(p) for p in pixels]
        )

    @app.post("/api/project", response_model=ProjectResponse)
    def project(req: ProjectRequest):
        if (req.image is None) == (req.sample_ref is None):
            return JSONResponse(status_code=400, content={"detail": "provide exactly one of image, sample_ref"})
        if req.image is not None:
            try:
                png = base64.b64decode(req.image, validate=True)
            except Exception:
                return JSONResponse(status_code=400, content={"detail": "image is not valid base64"})
            if len(png) > MAX_IMAGE_BYTES:
                return JSONResponse(status_code=413, content={"detail": "image too large"})
            try:
                pixels = png_to_pixels(png)
            except BiasLensError as exc:
                return JSONResponse(status_code=400, content={"detail": str(exc)})
        else:
            ref = req.sample_ref
            spec = pipeline.registry[pipeline.label(ref.dataset)]
            pixels = datamod.make_observation(spec, ref.seed, ref.index)[0]

        src = pipeline.label(req.from_)
        tgt = pipeline.label(req.to)
        z = pipeline.content_codes(pixels, np.array([src]))[0]
        projected = pipeline.project(pixels, src, tgt)[0]
        recon = pipeline.reconstruct(pixels)[0]
        stats = ZStats(
            dim=z.size, norm=float(np.linalg.norm(z)), mean=float(z.mean()),
            std=float(z.std()), min=float(z.min()), max=float(z.max()),
        )
        return ProjectResponse(
            source=_b64_png(pixels), reconstruction=_b64_png(recon), projection=_b64_png(projected), z_stats=stats
        )

    @app.post("/api/sample", response_model=SampleResponse)
    def sample(req: SampleRequest):
        pixels = pipeline.sample(req.dataset, req.count, req.seed)
        return SampleResponse(dataset=req.dataset, seed=req.seed, images=[_b64_png(p) for p in pixels])

    @app.get("/api/report")
    def report_endpoint():
        if state["report"] is None:
            state["report"] = compute_service_report(pipeline, data_dir)
        return JSONResponse(content=state["report"].to_dict())

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
