"""FastAPI application wrapping the prediction pipeline.

The server's own settings (``ORACLE_GRASP_CONFIG`` YAML plus the oracle
environment variables) act as defaults; each request may override pipeline
fields and oracle options.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses
import json
import os
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import Settings, build_settings, load_settings, make_oracle
from ..evaluation import AnnotationSet, EvalReport, evaluate_image
from ..geometry import Point
from ..io import LoadError, decode_depth_png, decode_png_rgb, image_digest
from ..oracle import OracleError
from ..pipeline import ConfigError, PipelineError, predict_grasp
from .schemas import EvaluateRequest, EvaluateResponse, OracleSpec, PredictRequest, PredictResponse

CONFIG_ENV = "ORACLE_GRASP_CONFIG"


def _b64(data: str, what: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise LoadError(f"{what}: invalid base64") from exc


def _merge(base: Settings, pipeline: dict[str, Any], oracle: OracleSpec,
           focal: float | None, clearance: float | None) -> Settings:
    doc = {
        "pipeline": base.pipeline.to_dict(),
        "oracle": dataclasses.asdict(base.oracle),
        "camera": {"focal_length_px": base.focal_length_px},
        "gripper": {"clearance_radius_m": base.clearance_radius_m},
    }
    orc = oracle.model_dump(exclude_none=True)
    if "targets" in orc:
        orc["targets"] = tuple(tuple(t) for t in orc["targets"])
    settings = build_settings(doc, pipeline_overrides=pipeline, oracle_overrides=orc,
                              focal_length_px=focal, clearance_radius_m=clearance)
    if settings.oracle.backend == "replay":
        raise ConfigError("the service does not replay transcripts")
    return settings


def create_app(settings: Settings | None = None) -> FastAPI:
    if settings is None:
        settings = load_settings(os.environ.get(CONFIG_ENV))
    app = FastAPI(title="oracle-grasp", version=__version__)
    app.state.settings = settings

    @app.exception_handler(ConfigError)
    @app.exception_handler(LoadError)
    async def _bad_request(_: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=422, content={"error": str(exc), "type": type(exc).__name__})

    @app.exception_handler(PipelineError)
    @app.exception_handler(OracleError)
    async def _upstream(_: Request, exc: Exception) -> JSONResponse:
        # oracle trouble is an upstream failure; anything else is a bad input
        upstream = isinstance(exc, OracleError) or isinstance(exc.__cause__, OracleError)
        return JSONResponse(status_code=502 if upstream else 422,
                            content={"error": str(exc), "type": type(exc).__name__})

    @app.get("/health")
    def health() -> dict:
        s: Settings = app.state.settings
        return {"status": "ok", "version": __version__, "oracle": s.oracle.backend, "settings_digest": s.digest()}

    @app.post("/v1/predict", response_model=PredictResponse)
    def predict(req: PredictRequest) -> PredictResponse:
        s = _merge(app.state.settings, req.pipeline, req.oracle, req.focal_length_px, req.clearance_radius_m)
        raw = _b64(req.image_png_b64, "image")
        image = decode_png_rgb(raw)
        depth = decode_depth_png(_b64(req.depth_png_b64, "depth")) if req.depth_png_b64 else None
        h, w = image.shape[:2]
        oracle = make_oracle(s.oracle, default_target=Point(w / 2, h / 2))
        try:
            result = predict_grasp(image, oracle, s.pipeline, depth, s.intrinsics, s.gripper)
        finally:
            oracle.close()
        return PredictResponse(result=json.loads(result.to_json()), image_digest=image_digest(raw),
                               settings_digest=s.digest())

    @app.post("/v1/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        s = _merge(app.state.settings, req.pipeline, req.oracle, req.focal_length_px, req.clearance_radius_m)
        rows, failures = [], {}
        for i, item in enumerate(req.items):
            ann = AnnotationSet.from_dict(item.annotation, where=f"$.items[{i}].annotation")
            image = decode_png_rgb(_b64(item.image_png_b64, item.id), where=item.id)
            depth = decode_depth_png(_b64(item.depth_png_b64, item.id), where=item.id) if item.depth_png_b64 else None
            orc = dataclasses.replace(s.oracle, seed=s.oracle.seed + i)
            oracle = make_oracle(orc, default_target=ann.grasps[0].position)
            try:
                result = predict_grasp(image, oracle, s.pipeline, depth, s.intrinsics, s.gripper)
            except (PipelineError, OracleError) as exc:
                failures[item.id] = str(exc)
                continue
            finally:
                oracle.close()
            pose = result.pose
            rows.append(evaluate_image(item.id, Point(float(pose.x), float(pose.y)), pose.theta_deg, ann,
                                       result.diagnostics.get("depth_refinement_enabled")))
        report = EvalReport(rows, failures, settings={"oracle": s.oracle.backend, "config_digest": s.digest()})
        return EvaluateResponse(report=json.loads(report.to_json()))

    return app


def __getattr__(name: str):
    # `app` is built lazily so importing this module never reads config files
    if name == "app":
        return create_app()
    raise AttributeError(name)
