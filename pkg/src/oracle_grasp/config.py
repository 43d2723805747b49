"""Runtime settings: pipeline config plus camera, gripper and oracle sections.

Config files are YAML mappings with optional sections::

    pipeline:
      grp_iterations: 6
      stop_window: 3
    camera:
      focal_length_px: 500
    gripper:
      clearance_radius_m: 0.04
    oracle:
      backend: http
      model: llama-3.2-11b-vision
      temperature: 0.6
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .depth_refine import CameraIntrinsics, GripperSpec
from .geometry import Point
from .io import load_config_file
from .oracle import HttpOracle, Oracle, ReplayOracle, ScriptedOracle
from .pipeline import ConfigError, PipelineConfig
from .transcript import read_transcript

DEFAULT_FOCAL_PX = 500.0
DEFAULT_CLEARANCE_M = 0.04


@dataclass(frozen=True)
class OracleSettings:
    backend: str = "scripted"  # scripted | replay | http
    # scripted
    targets: tuple[tuple[float, float], ...] = ()
    context_text: str = "an object with a graspable body"
    noise_radius: float = 0.0
    mode: str = "target"
    seed: int = 0
    # replay
    transcript: str | None = None
    # http
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.6
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.backend not in ("scripted", "replay", "http"):
            raise ConfigError(f"unknown oracle backend {self.backend!r}")
        object.__setattr__(self, "targets", tuple(tuple(float(c) for c in t) for t in self.targets))


@dataclass(frozen=True)
class Settings:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    focal_length_px: float = DEFAULT_FOCAL_PX
    clearance_radius_m: float = DEFAULT_CLEARANCE_M
    oracle: OracleSettings = field(default_factory=OracleSettings)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal_length_px)

    @property
    def gripper(self) -> GripperSpec:
        return GripperSpec(self.clearance_radius_m)

    def digest(self) -> str:
        """Digest of everything that shapes a prediction apart from the oracle itself."""
        doc = {
            "pipeline": self.pipeline.to_dict(),
            "focal_length_px": self.focal_length_px,
            "clearance_radius_m": self.clearance_radius_m,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name)
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return sec


def build_settings(doc: dict | None = None, pipeline_overrides: dict[str, Any] | None = None,
                   oracle_overrides: dict[str, Any] | None = None,
                   focal_length_px: float | None = None,
                   clearance_radius_m: float | None = None) -> Settings:
    doc = doc or {}
    unknown = set(doc) - {"pipeline", "camera", "gripper", "oracle"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    pipe = dict(_section(doc, "pipeline"))
    pipe.update({k: v for k, v in (pipeline_overrides or {}).items() if v is not None})
    orc = dict(_section(doc, "oracle"))
    orc.update({k: v for k, v in (oracle_overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(OracleSettings)}
    if set(orc) - known:
        raise ConfigError(f"unknown oracle config keys: {sorted(set(orc) - known)}")
    focal = focal_length_px or _section(doc, "camera").get("focal_length_px", DEFAULT_FOCAL_PX)
    clearance = clearance_radius_m or _section(doc, "gripper").get("clearance_radius_m", DEFAULT_CLEARANCE_M)
    try:
        settings = Settings(PipelineConfig.from_dict(pipe), float(focal), float(clearance), OracleSettings(**orc))
        CameraIntrinsics(settings.focal_length_px)
        GripperSpec(settings.clearance_radius_m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return settings


def load_settings(path: str | Path | None = None, **overrides) -> Settings:
    doc = load_config_file(path) if path is not None else {}
    return build_settings(doc, **overrides)


def make_oracle(settings: OracleSettings, default_target: Point | None = None) -> Oracle:
    if settings.backend == "scripted":
        targets = [Point(x, y) for x, y in settings.targets]
        if not targets and settings.mode == "target":
            if default_target is None:
                raise ConfigError("scripted oracle needs a target point")
            targets = [default_target]
        return ScriptedOracle(targets, settings.context_text, settings.noise_radius, settings.mode, settings.seed)
    if settings.backend == "replay":
        if not settings.transcript:
            raise ConfigError("replay oracle needs a transcript path")
        return ReplayOracle(read_transcript(settings.transcript))
    kwargs: dict[str, Any] = {"temperature": settings.temperature, "timeout": settings.timeout}
    if settings.endpoint:
        kwargs["endpoint"] = settings.endpoint
    if settings.model:
        kwargs["model"] = settings.model
    return HttpOracle.from_env(**kwargs)
