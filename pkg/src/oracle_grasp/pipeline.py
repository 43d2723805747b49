"""Grasp candidate generation: the grid-query loop, early stopping, orientation
refinement and pose estimation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Sequence

import numpy as np

from . import geometry as geo
from .depth_refine import CameraIntrinsics, GripperSpec, RefinementResult, refine_grasp
from .geometry import Point, RectMask
from .io import DepthMap
from .oracle import (
    Oracle,
    OracleError,
    ParseError,
    SceneContext,
    query_grasp_region,
    query_scene_context,
)
from .tiling import (
    GRID_MAX,
    GRID_MIN,
    CropStep,
    FrameTransform,
    GridSpec,
    OverlayStyle,
    cell_mask,
    crop_image,
    crop_window_from_masks,
    render_grid_overlay,
    rotate_image,
)
from .transcript import OracleTranscript

log = logging.getLogger(__name__)

LOW_CONFIDENCE_ANISOTROPY = 1 + 1e-6


class PipelineError(RuntimeError):
    def __init__(self, message: str, transcript: OracleTranscript | None = None) -> None:
        super().__init__(message)
        self.transcript = transcript


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    grp_iterations: int = 6
    stop_window: int = 3
    iou_threshold: float = 0.4
    stop_factor: float = 0.3
    min_axis_angle_deg: float = 15.0
    anisotropy_min: float = 2.0
    grid_schedule: tuple[tuple[int, int], ...] | None = None
    crop_margin_frac: float = 0.10
    crop_iters: int | None = None
    crop_counts_against_budget: bool = True
    continuous_early_stop: bool = False
    early_stop_pose_source: str = "crop"  # "crop" or "all"
    max_parse_retries: int = 2
    depth_samples: int = 10
    use_scp: bool = True
    use_orientation_refinement: bool = True
    use_explanation: bool = True
    use_depth_refinement: bool = True
    overlay_mode: str = "grid"
    overlay_thickness: int = 2
    overlay_color: tuple[int, int, int] = (255, 0, 0)

    def __post_init__(self) -> None:
        if self.grid_schedule is not None:
            sched = tuple(tuple(int(x) for x in pair) for pair in self.grid_schedule)
            object.__setattr__(self, "grid_schedule", sched)
        object.__setattr__(self, "overlay_color", tuple(int(c) for c in self.overlay_color))
        self.validate()

    def validate(self) -> None:
        k, m = self.grp_iterations, self.stop_window
        if not 1 <= m < k:
            raise ConfigError(f"need 1 <= stop_window < grp_iterations, got m={m}, K={k}")
        if not 0 <= self.stop_factor < 1:
            raise ConfigError(f"stop_factor must lie in [0, 1), got {self.stop_factor}")
        if not 0 <= self.iou_threshold <= 1:
            raise ConfigError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if self.crop_iters is not None and self.crop_iters < 1:
            raise ConfigError("crop_iters must be >= 1")
        if self.max_parse_retries < 0:
            raise ConfigError("max_parse_retries must be >= 0")
        if self.depth_samples < 1:
            raise ConfigError("depth_samples must be >= 1")
        if self.crop_margin_frac < 0:
            raise ConfigError("crop_margin_frac must be >= 0")
        if self.early_stop_pose_source not in ("crop", "all"):
            raise ConfigError(f"early_stop_pose_source must be 'crop' or 'all', got {self.early_stop_pose_source!r}")
        if self.overlay_mode not in ("grid", "none"):
            raise ConfigError(f"overlay_mode must be 'grid' or 'none', got {self.overlay_mode!r}")
        if self.overlay_thickness < 0:
            raise ConfigError("overlay_thickness must be >= 0")
        if self.grid_schedule is not None:
            if len(set(self.grid_schedule)) != len(self.grid_schedule):
                raise ConfigError("grid_schedule has repeated entries")
            if len(self.grid_schedule) < k:
                raise ConfigError(f"grid_schedule needs at least {k} entries")
            for u, v in self.grid_schedule:
                if u < 1 or v < 1:
                    raise ConfigError(f"grid {u}x{v} invalid")
        elif k > len(_all_pairs()):
            raise ConfigError(f"grp_iterations={k} exceeds the {len(_all_pairs())} available grids")

    @property
    def effective_crop_iters(self) -> int:
        return self.crop_iters if self.crop_iters is not None else self.stop_window

    def schedule(self) -> tuple[tuple[int, int], ...]:
        if self.grid_schedule is not None:
            return self.grid_schedule
        need = self.grp_iterations + self.effective_crop_iters + self.stop_window
        return tuple(default_grid_schedule(min(need, len(_all_pairs()))))

    def overlay_style(self) -> OverlayStyle:
        return OverlayStyle(mode=self.overlay_mode, color=self.overlay_color, thickness=self.overlay_thickness)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["grid_schedule"] is not None:
            d["grid_schedule"] = [list(p) for p in d["grid_schedule"]]
        d["overlay_color"] = list(d["overlay_color"])
        return d

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PipelineConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _all_pairs() -> list[tuple[int, int]]:
    diag = [(n, n) for n in range(GRID_MIN, GRID_MAX + 1)]
    off = [(u, v) for u in range(GRID_MIN, GRID_MAX + 1) for v in range(GRID_MIN, GRID_MAX + 1) if u != v]
    off.sort(key=lambda p: (p[0] * p[1], p[0]))
    return diag + off


def default_grid_schedule(k: int) -> list[tuple[int, int]]:
    """Coarse-to-fine square grids, then off-diagonal pairs by increasing cell count."""
    pairs = _all_pairs()
    if k < 1 or k > len(pairs):
        raise ConfigError(f"no default schedule with {k} distinct grids in {{3..9}}^2")
    return pairs[:k]


# ---------------------------------------------------------------------------
# candidates and results


@dataclass(frozen=True)
class Candidate:
    mask: RectMask
    frame: FrameTransform
    stage: str  # "full", "crop" or "rotated"
    center: Point  # root frame
    origin: str = "oracle"  # or "intersection"
    grid: tuple[int, int] | None = None
    cell_index: int | None = None
    used_for_pose: bool = True

    def to_dict(self) -> dict:
        return {
            "mask": list(self.mask.as_tuple()),
            "stage": self.stage,
            "origin": self.origin,
            "frame": self.frame.describe(),
            "center": [self.center.x, self.center.y],
            "grid": list(self.grid) if self.grid else None,
            "cell_index": self.cell_index,
            "used_for_pose": self.used_for_pose,
        }


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]
    intersections_added: int

    @property
    def masks(self) -> list[RectMask]:
        return [c.mask for c in self.candidates]

    @property
    def centers(self) -> list[Point]:
        return [c.center for c in self.candidates]

    @property
    def pose_centers(self) -> list[Point]:
        return [c.center for c in self.candidates if c.used_for_pose]

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class GraspPose:
    x: int
    y: int
    theta_deg: float

    @property
    def point(self) -> Point:
        return Point(float(self.x), float(self.y))


@dataclass
class GraspResult:
    pose: GraspPose
    unrefined_pose: GraspPose
    candidate_set: CandidateSet
    early_stopped: bool
    grp_queries_used: int
    orientation_refined: bool
    low_confidence_orientation: bool
    transcript: OracleTranscript
    image_size: tuple[int, int]
    config_digest: str
    centroid: Point
    depth: RefinementResult | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        depth = None
        if self.depth is not None:
            d = self.depth
            depth = {
                "refined": d.refined,
                "point": [d.point.x, d.point.y],
                "depth_mm": None if math.isnan(d.depth_mm) else d.depth_mm,
                "start_depth_mm": None if math.isnan(d.start_depth_mm) else d.start_depth_mm,
                "radii_px": list(d.radii_px),
                "note": d.note,
            }
        return {
            "pose": {"x": self.pose.x, "y": self.pose.y, "theta_deg": self.pose.theta_deg},
            "unrefined_pose": {"x": self.unrefined_pose.x, "y": self.unrefined_pose.y,
                               "theta_deg": self.unrefined_pose.theta_deg},
            "centroid": [self.centroid.x, self.centroid.y],
            "image_size": list(self.image_size),
            "early_stopped": self.early_stopped,
            "grp_queries_used": self.grp_queries_used,
            "orientation_refined": self.orientation_refined,
            "low_confidence_orientation": self.low_confidence_orientation,
            "intersections_added": self.candidate_set.intersections_added,
            "candidates": [c.to_dict() for c in self.candidate_set.candidates],
            "depth_refinement": depth,
            "config_digest": self.config_digest,
            "transcript": {"entries": len(self.transcript), "digest": self.transcript.content_digest()},
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# steps


def augment_intersections(masks: Sequence[RectMask], iou_threshold: float) -> tuple[list[RectMask], int]:
    """Append ``a & b`` for every original pair whose IoU exceeds the threshold."""
    out = list(masks)
    added = 0
    for a, b in combinations(masks, 2):
        if geo.rect_iou(a, b) > iou_threshold:
            inter = geo.rect_intersection(a, b)
            if inter is not None:
                out.append(inter)
                added += 1
    return out, added


def early_stop_check(centers: Sequence[Point], stop_factor: float, diagonal: float) -> bool:
    if not centers:
        raise PipelineError("early-stop check on an empty center set")
    if diagonal <= 0:
        raise PipelineError("image diagonal must be positive")
    return geo.max_spread(centers, geo.centroid(centers)) < stop_factor * diagonal


def _clamp_point(p: Point, size: tuple[int, int]) -> Point:
    w, h = size
    return Point(min(max(p.x, 0.0), float(w)), min(max(p.y, 0.0), float(h)))


def _emit(p: Point, size: tuple[int, int]) -> tuple[int, int]:
    w, h = size
    x = int(math.floor(p.x + 0.5))
    y = int(math.floor(p.y + 0.5))
    return min(max(x, 0), w - 1), min(max(y, 0), h - 1)


def estimate_pose(centers: Sequence[Point], image_size: tuple[int, int]) -> tuple[GraspPose, bool, Point]:
    """Centroid position and principal-axis orientation.

    Returns the pose, a low-confidence flag (orientation undefined) and the
    unrounded centroid.
    """
    if not centers:
        raise PipelineError("no candidates")
    c = geo.centroid(centers)
    x, y = _emit(c, image_size)
    if len(centers) < 2:
        return GraspPose(x, y, 0.0), True, c
    axis = geo.principal_axis(centers)
    if axis.isotropic or axis.anisotropy <= LOW_CONFIDENCE_ANISOTROPY:
        return GraspPose(x, y, 0.0), True, c
    return GraspPose(x, y, axis.angle_deg), False, c


class _Loop:
    """State of one prediction's query loop."""

    def __init__(self, image: np.ndarray, oracle: Oracle, config: PipelineConfig,
                 context: SceneContext | None, transcript: OracleTranscript) -> None:
        self.image = image
        self.oracle = oracle
        self.config = config
        self.context = context
        self.transcript = transcript
        self.size = (image.shape[1], image.shape[0])
        self.diagonal = math.hypot(*self.size)
        self.schedule = config.schedule()
        self.iteration = 0  # budget units consumed
        self.candidates: list[Candidate] = []
        self.discarded = 0
        self.style = config.overlay_style()

    def grid_for(self, size: tuple[int, int]) -> GridSpec:
        u, v = self.schedule[self.iteration % len(self.schedule)]
        return GridSpec(min(u, size[0]), min(v, size[1]), size[0], size[1])

    def query(self, image: np.ndarray, frame: FrameTransform, stage: str) -> Candidate | None:
        """One budget unit: a grasp-region query with parse retries."""
        size = (image.shape[1], image.shape[0])
        grid = self.grid_for(size)
        self.iteration += 1
        overlaid = render_grid_overlay(image, grid, self.style)
        last_error = None
        for _ in range(self.config.max_parse_retries + 1):
            try:
                choice, _ = query_grasp_region(
                    self.oracle, overlaid, grid, self.context,
                    self.config.use_explanation, self.transcript, frame,
                )
            except ParseError as exc:
                last_error = exc
                log.info("grasp-region parse failure (%s), retrying", exc)
                continue
            mask = cell_mask(grid, choice.cell_index)
            center = _clamp_point(frame.to_original(mask.center), self.size)
            cand = Candidate(mask, frame, stage, center, grid=(grid.columns, grid.rows),
                             cell_index=choice.cell_index)
            self.candidates.append(cand)
            return cand
        log.warning("iteration %d discarded after retries: %s", self.iteration, last_error)
        self.discarded += 1
        return None


def _augment_all(candidates: list[Candidate], iou_threshold: float) -> list[Candidate]:
    """IoU augmentation within each axis-aligned frame; rotated masks excluded."""
    added: list[Candidate] = []
    for stage in ("full", "crop"):
        group = [c for c in candidates if c.stage == stage and c.origin == "oracle"]
        if len(group) < 2:
            continue
        extended, s = augment_intersections([c.mask for c in group], iou_threshold)
        frame = group[0].frame
        for mask in extended[len(group):]:
            added.append(Candidate(mask, frame, stage, frame.to_original(mask.center), origin="intersection"))
    return added


def orientation_refinement(
    loop: _Loop, source: np.ndarray, source_frame: FrameTransform, centers: Sequence[Point]
) -> tuple[list[Candidate], dict]:
    """Rotate the working image to align the centers' principal axis with the grid and re-query."""
    cfg = loop.config
    info: dict[str, Any] = {"fired": False}
    if len(centers) < 2:
        info["reason"] = "fewer than two centers"
        return [], info
    axis = geo.principal_axis(centers)
    axis_angle = geo.signed_angle_mod180(axis.angle_deg)
    info.update(axis_angle_deg=axis_angle, anisotropy=min(axis.anisotropy, 1e12))
    if axis.isotropic or axis.anisotropy < cfg.anisotropy_min:
        info["reason"] = "centers not anisotropic enough"
        return [], info
    if abs(axis_angle) <= cfg.min_axis_angle_deg:
        info["reason"] = "angle below threshold"
        return [], info
    rotated, step = rotate_image(source, -axis_angle)
    frame = source_frame.then(step)
    new = []
    for _ in range(cfg.stop_window):
        c = loop.query(rotated, frame, "rotated")
        if c is not None:
            new.append(c)
    info["fired"] = True
    return new, info


def run_candidate_loop(
    image: np.ndarray,
    oracle: Oracle,
    config: PipelineConfig,
    context: SceneContext | None = None,
    transcript: OracleTranscript | None = None,
) -> GraspResult:
    transcript = transcript if transcript is not None else OracleTranscript()
    loop = _Loop(image, oracle, config, context, transcript)
    k, m = config.grp_iterations, config.stop_window
    root = FrameTransform.identity()
    diag: dict[str, Any] = {}

    early_stopped = False
    cropped: tuple[np.ndarray, FrameTransform] | None = None
    full_masks: list[Candidate] = []

    def crop_stage(trigger: list[Candidate], room: int) -> bool:
        nonlocal cropped
        window = crop_window_from_masks([c.mask for c in trigger], loop.size, config.crop_margin_frac)
        sub = crop_image(image, window)
        frame = root.then(CropStep(window.rect.x0, window.rect.y0))
        cropped = (sub, frame)
        diag["crop_window"] = list(window.rect.as_tuple())
        stage_centers = []
        for _ in range(room):
            c = loop.query(sub, frame, "crop")
            if c is not None:
                stage_centers.append(c.center)
        ok = bool(stage_centers) and early_stop_check(stage_centers, config.stop_factor, loop.diagonal)
        diag["crop_stage_check"] = ok
        return ok

    try:
        checked = False
        budget = k
        while loop.iteration < budget:
            c = loop.query(image, root, "full")
            if c is not None:
                full_masks.append(c)
            if checked or loop.iteration < m:
                continue
            if not config.continuous_early_stop:
                checked = True
            window = full_masks[-m:]
            ok = bool(window) and early_stop_check([x.center for x in window], config.stop_factor, loop.diagonal)
            diag.setdefault("stage_a_checks", []).append(ok)
            if not ok:
                continue
            checked = True
            room = config.effective_crop_iters
            if config.crop_counts_against_budget:
                # with K < 2m the crop stage gets whatever budget is left
                room = min(room, budget - loop.iteration)
            if room > 0 and crop_stage(window, room):
                early_stopped = True
                break
            if not config.crop_counts_against_budget:
                budget += config.effective_crop_iters

        extra = _augment_all(loop.candidates, config.iou_threshold)
        candidates = loop.candidates + extra

        refined = False
        if config.use_orientation_refinement and not early_stopped:
            source, frame = cropped if cropped is not None else (image, root)
            new, info = orientation_refinement(loop, source, frame, [c.center for c in candidates])
            candidates += new
            refined = info["fired"]
            diag["orientation_refinement"] = info
    except OracleError as exc:
        raise PipelineError(str(exc), transcript) from exc

    if not candidates:
        raise PipelineError("no candidates", transcript)

    if early_stopped and config.early_stop_pose_source == "crop":
        # the zoomed crop stage supersedes the coarse full-image masks
        candidates = [dataclasses.replace(c, used_for_pose=(c.stage == "crop")) for c in candidates]
    diag["pose_source"] = "crop" if early_stopped and config.early_stop_pose_source == "crop" else "all"
    cset = CandidateSet(tuple(candidates), len(extra))
    pose, low_conf, centroid = estimate_pose(cset.pose_centers, loop.size)
    diag["discarded_iterations"] = loop.discarded
    return GraspResult(
        pose=pose,
        unrefined_pose=pose,
        candidate_set=cset,
        early_stopped=early_stopped,
        grp_queries_used=loop.iteration,
        orientation_refined=refined,
        low_confidence_orientation=low_conf,
        transcript=transcript,
        image_size=loop.size,
        config_digest=config.digest(),
        centroid=centroid,
        diagnostics=diag,
    )


def predict_grasp(
    image: np.ndarray,
    oracle: Oracle,
    config: PipelineConfig = PipelineConfig(),
    depth: DepthMap | None = None,
    intrinsics: CameraIntrinsics | None = None,
    gripper: GripperSpec | None = None,
) -> GraspResult:
    if image.ndim != 3 or image.shape[2] != 3:
        raise PipelineError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    if depth is not None and depth.values.shape != image.shape[:2]:
        raise PipelineError(
            f"depth map {depth.width}x{depth.height} does not match image {image.shape[1]}x{image.shape[0]}"
        )
    transcript = OracleTranscript()
    context = None
    if config.use_scp:
        try:
            context, _ = query_scene_context(oracle, image, transcript)
        except OracleError as exc:
            raise PipelineError(str(exc), transcript) from exc
    result = run_candidate_loop(image, oracle, config, context, transcript)
    result.diagnostics["scene_context"] = context.text if context else None

    if depth is not None and config.use_depth_refinement:
        if intrinsics is None or gripper is None:
            raise PipelineError("depth refinement needs camera intrinsics and a gripper spec")
        ref = refine_grasp(depth, result.pose.point, intrinsics, gripper, config.depth_samples)
        result.depth = ref
        rx, ry = int(ref.point.x), int(ref.point.y)
        result.pose = GraspPose(rx, ry, result.unrefined_pose.theta_deg)
    result.diagnostics["depth_refinement_enabled"] = bool(depth is not None and config.use_depth_refinement)
    return result
