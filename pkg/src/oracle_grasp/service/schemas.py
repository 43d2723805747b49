"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class OracleSpec(BaseModel):
    """Per-request oracle choice. Unset fields fall back to the server's defaults."""

    model_config = ConfigDict(extra="forbid")

    backend: Optional[Literal["scripted", "http"]] = None
    targets: Optional[list[tuple[float, float]]] = None
    mode: Optional[Literal["target", "random"]] = None
    noise_radius: Optional[float] = Field(default=None, ge=0)
    seed: Optional[int] = None
    context_text: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    temperature: Optional[float] = None
    timeout: Optional[float] = Field(default=None, gt=0)


class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_png_b64: str
    depth_png_b64: Optional[str] = None
    pipeline: dict[str, Any] = Field(default_factory=dict)
    focal_length_px: Optional[float] = Field(default=None, gt=0)
    clearance_radius_m: Optional[float] = Field(default=None, gt=0)
    oracle: OracleSpec = Field(default_factory=OracleSpec)


class PredictResponse(BaseModel):
    result: dict[str, Any]
    image_digest: str
    settings_digest: str


class EvalItem(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    image_png_b64: str
    depth_png_b64: Optional[str] = None
    annotation: dict[str, Any]


class EvaluateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    items: list[EvalItem] = Field(min_length=1)
    pipeline: dict[str, Any] = Field(default_factory=dict)
    focal_length_px: Optional[float] = Field(default=None, gt=0)
    clearance_radius_m: Optional[float] = Field(default=None, gt=0)
    oracle: OracleSpec = Field(default_factory=OracleSpec)


class EvaluateResponse(BaseModel):
    report: dict[str, Any]


class ErrorBody(BaseModel):
    error: str
    type: str
