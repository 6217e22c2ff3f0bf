"""HTTP service wrapping the codec.

Binary payloads (PLY files, bitstream containers) travel base64-encoded in
JSON bodies.  Infinite PSNR values (identical clouds) are transported as
null, since JSON has no infinity literal.

The model is process-global state: load a checkpoint at startup or through
POST /model/load, then encode/decode/evaluate against it.
"""

from __future__ import annotations

import base64
import binascii
import math
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .bdrate import compute_bd_psnr, compute_bd_rate
from .checkpoint import load_checkpoint
from .codec import decode, encode
from .container import parse_container, serialize_container, truncate_container
from .evaluate import curve_csv, evaluate_levels
from .geometry import (
    PointCloud,
    VoxelSet,
    compute_d1_psnr,
    compute_d2_psnr,
    estimate_normals,
    parse_ply,
    serialize_ply,
    voxelize,
)
from .model import CodecModel


# --- request / response models -------------------------------------------------


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str = __version__


class ModelInfo(BaseModel):
    loaded: bool
    path: Optional[str] = None
    n_params: Optional[int] = None
    n_levels: Optional[int] = None
    groups: Optional[str] = None
    param_hash: Optional[str] = None


class LoadModelRequest(BaseModel):
    path: str


class EncodeRequest(BaseModel):
    ply_b64: str
    bit_depth: int = Field(default=7, ge=4, le=16)
    normalize: bool = True


class EncodeResponse(BaseModel):
    container_b64: str
    n_input: int
    n_voxels: int
    bpp: float
    segment_bytes: list
    segment_bits_estimate: list


class DecodeRequest(BaseModel):
    container_b64: str
    level: int = Field(ge=1)


class DecodeResponse(BaseModel):
    ply_b64: str
    n_points: int
    level: int
    bit_depth: int


class TruncateRequest(BaseModel):
    container_b64: str
    level: int = Field(ge=1)


class TruncateResponse(BaseModel):
    container_b64: str
    n_segments: int


class RdPointModel(BaseModel):
    level: int
    bpp: float
    d1_psnr: Optional[float] = None  # null = infinite (identical clouds)
    d2_psnr: Optional[float] = None


class EvaluateRequest(BaseModel):
    ply_b64: str
    bit_depth: int = Field(default=7, ge=4, le=16)
    normalize: bool = True
    levels: Optional[list] = None
    with_d2: bool = True
    peak: Optional[float] = None


class EvaluateResponse(BaseModel):
    points: list  # of RdPointModel
    errors: dict
    csv: str


class MetricsRequest(BaseModel):
    ref_ply_b64: str
    deg_ply_b64: str
    bit_depth: int = Field(default=7, ge=1, le=16)
    normalize: bool = True
    with_d2: bool = True
    peak: Optional[float] = None


class MetricsResponse(BaseModel):
    d1_psnr: Optional[float] = None
    d2_psnr: Optional[float] = None


class BdRateRequest(BaseModel):
    curve_a: list  # of RdPointModel dicts
    curve_b: list
    metric: str = "d1_psnr"


class BdRateResponse(BaseModel):
    bd_rate_percent: Optional[float] = None  # null = undefined (no overlap)
    bd_psnr_db: Optional[float] = None
    defined: bool


# --- helpers -------------------------------------------------------------------


def _finite_or_none(x: Optional[float]) -> Optional[float]:
    if x is None or not math.isfinite(x):
        return None
    return float(x)


def _b64_bytes(text: str, what: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail=f"{what} is not valid base64: {exc}")


def _load_voxels(ply_b64: str, bit_depth: int, normalize: bool):
    cloud = parse_ply(_b64_bytes(ply_b64, "ply_b64"))
    voxels, _ = voxelize(cloud, bit_depth, normalize=normalize)
    return voxels, len(cloud.points)


class _RdPointView:
    """Adapter giving bdrate attribute access over JSON point dicts."""

    def __init__(self, d: dict):
        self.bpp = d["bpp"]
        self.d1_psnr = d.get("d1_psnr")
        self.d2_psnr = d.get("d2_psnr")


# --- application ----------------------------------------------------------------


def create_app(checkpoint_path: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="progpcc", version=__version__,
                  description="Scalable learned point cloud geometry codec")
    state = {"model": None, "path": None}
    if checkpoint_path:
        model, _ = load_checkpoint(checkpoint_path)
        state.update(model=model, path=checkpoint_path)

    def current_model() -> CodecModel:
        if state["model"] is None:
            raise HTTPException(status_code=409,
                                detail="no model loaded; POST /model/load first")
        return state["model"]

    def model_info() -> ModelInfo:
        model = state["model"]
        if model is None:
            return ModelInfo(loaded=False)
        return ModelInfo(
            loaded=True,
            path=state["path"],
            n_params=model.num_params(),
            n_levels=model.config.n_levels,
            groups=model.config.groups.format(),
            param_hash=model.param_hash().hex(),
        )

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse()

    @app.get("/model", response_model=ModelInfo)
    def get_model():
        return model_info()

    @app.post("/model/load", response_model=ModelInfo)
    def load_model(req: LoadModelRequest):
        try:
            model, _ = load_checkpoint(req.path)
        except FileNotFoundError:
            raise HTTPException(status_code=404, detail=f"no checkpoint at {req.path!r}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        state.update(model=model, path=req.path)
        return model_info()

    @app.post("/encode", response_model=EncodeResponse)
    def encode_endpoint(req: EncodeRequest):
        model = current_model()
        voxels, n_raw = _load_voxels(req.ply_b64, req.bit_depth, req.normalize)
        try:
            result = encode(voxels, model)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        blob = serialize_container(result.container)
        return EncodeResponse(
            container_b64=base64.b64encode(blob).decode(),
            n_input=n_raw,
            n_voxels=result.n_input,
            bpp=len(blob) * 8 / n_raw,
            segment_bytes=[len(s) for s in result.container.segments],
            segment_bits_estimate=result.segment_bits_estimate,
        )

    @app.post("/decode", response_model=DecodeResponse)
    def decode_endpoint(req: DecodeRequest):
        model = current_model()
        try:
            container = parse_container(_b64_bytes(req.container_b64, "container_b64"))
            voxels = decode(container, model, req.level)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        cloud = PointCloud(voxels.coords.astype(float))
        return DecodeResponse(
            ply_b64=base64.b64encode(serialize_ply(cloud, binary=True)).decode(),
            n_points=len(voxels),
            level=req.level,
            bit_depth=voxels.bit_depth,
        )

    @app.post("/truncate", response_model=TruncateResponse)
    def truncate_endpoint(req: TruncateRequest):
        try:
            container = parse_container(_b64_bytes(req.container_b64, "container_b64"))
            cut = truncate_container(container, req.level)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return TruncateResponse(
            container_b64=base64.b64encode(serialize_container(cut)).decode(),
            n_segments=len(cut.segments),
        )

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate_endpoint(req: EvaluateRequest):
        model = current_model()
        voxels, n_raw = _load_voxels(req.ply_b64, req.bit_depth, req.normalize)
        try:
            report = evaluate_levels(model, voxels, levels=req.levels, n_in=n_raw,
                                     with_d2=req.with_d2, peak=req.peak)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        points = [
            RdPointModel(level=p.level, bpp=p.bpp,
                         d1_psnr=_finite_or_none(p.d1_psnr),
                         d2_psnr=_finite_or_none(p.d2_psnr)).model_dump()
            for p in report.curve
        ]
        return EvaluateResponse(
            points=points,
            errors={str(k): v for k, v in report.errors.items()},
            csv=curve_csv(report.curve),
        )

    @app.post("/metrics", response_model=MetricsResponse)
    def metrics_endpoint(req: MetricsRequest):
        ref, _ = _load_voxels(req.ref_ply_b64, req.bit_depth, req.normalize)
        deg, _ = _load_voxels(req.deg_ply_b64, req.bit_depth, req.normalize)
        peak = req.peak if req.peak is not None else float(2 ** req.bit_depth - 1)
        d1 = compute_d1_psnr(ref, deg, peak)
        d2 = None
        if req.with_d2 and len(ref) >= 16:
            d2 = compute_d2_psnr(ref, deg, estimate_normals(ref), peak)
        return MetricsResponse(d1_psnr=_finite_or_none(d1), d2_psnr=_finite_or_none(d2))

    @app.post("/bdrate", response_model=BdRateResponse)
    def bdrate_endpoint(req: BdRateRequest):
        curve_a = [_RdPointView(p) for p in req.curve_a]
        curve_b = [_RdPointView(p) for p in req.curve_b]
        try:
            rate = compute_bd_rate(curve_a, curve_b, req.metric)
            psnr = compute_bd_psnr(curve_a, curve_b, req.metric)
        except (ValueError, AttributeError, KeyError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return BdRateResponse(bd_rate_percent=rate, bd_psnr_db=psnr,
                              defined=rate is not None)

    return app


def default_app() -> FastAPI:
    """Entry point for `uvicorn progpcc.service:default_app --factory`."""
    import os

    return create_app(os.environ.get("PROGPCC_CHECKPOINT") or None)
