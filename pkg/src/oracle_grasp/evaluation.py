"""Grasp metrics against human annotations and batch reports."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .geometry import Point, angular_distance_mod180
from .io import LoadError


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class GraspAnnotation:
    position: Point
    theta_deg: float


@dataclass(frozen=True)
class AnnotationSet:
    image: str
    grasps: tuple[GraspAnnotation, ...]
    d_px: float
    mm_per_px: float | None = None

    def __post_init__(self) -> None:
        if not self.grasps:
            raise EvalError(f"{self.image}: at least one grasp annotation required")
        if not self.d_px > 0:
            raise EvalError(f"{self.image}: bounding-circle diameter must be positive")
        if self.mm_per_px is not None and not self.mm_per_px > 0:
            raise EvalError(f"{self.image}: mm_per_px must be positive")

    def nearest(self, p: Point) -> tuple[GraspAnnotation, float]:
        best = min(self.grasps, key=lambda g: g.position.distance(p))
        return best, best.position.distance(p)

    def to_dict(self) -> dict:
        doc = {
            "image": self.image,
            "d_px": self.d_px,
            "grasps": [{"x": g.position.x, "y": g.position.y, "theta_deg": g.theta_deg} for g in self.grasps],
        }
        if self.mm_per_px is not None:
            doc["mm_per_px"] = self.mm_per_px
        return doc

    @classmethod
    def from_dict(cls, doc: dict, where: str = "$") -> AnnotationSet:
        try:
            grasps = tuple(
                GraspAnnotation(Point(float(g["x"]), float(g["y"])), float(g["theta_deg"]))
                for g in doc["grasps"]
            )
            return cls(
                image=str(doc["image"]),
                grasps=grasps,
                d_px=float(doc["d_px"]),
                mm_per_px=None if doc.get("mm_per_px") is None else float(doc["mm_per_px"]),
            )
        except KeyError as exc:
            raise LoadError(f"{where}: missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise LoadError(f"{where}: {exc}") from exc


def load_annotation(path: str | Path) -> AnnotationSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return AnnotationSet.from_dict(doc, where=str(path))


def position_nrmse(pred: Point, ann: AnnotationSet) -> float:
    return ann.nearest(pred)[1] / ann.d_px


def position_rmse_mm(pred: Point, ann: AnnotationSet, mm_per_px: float | None = None) -> float:
    scale = mm_per_px if mm_per_px is not None else ann.mm_per_px
    if scale is None:
        raise EvalError("no metric scale")
    if not scale > 0:
        raise EvalError("mm_per_px must be positive")
    return ann.nearest(pred)[1] * scale


def orientation_error(theta_deg: float, ann: AnnotationSet, pred: Point | None = None) -> float:
    """Mod-180 angular error against the annotation nearest to ``pred``.

    Without ``pred`` the first annotation is used.
    """
    target = ann.nearest(pred)[0] if pred is not None else ann.grasps[0]
    return angular_distance_mod180(theta_deg, target.theta_deg)


@dataclass(frozen=True)
class ImageMetrics:
    image: str
    nrmse: float
    orientation_mae: float
    rmse_mm: float | None = None
    depth_refined: bool | None = None

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "nrmse": self.nrmse,
            "nrmse_x100": self.nrmse * 100,
            "rmse_mm": self.rmse_mm,
            "orientation_mae": self.orientation_mae,
            "depth_refined": self.depth_refined,
        }


def _mean_std(values: Sequence[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    mean = math.fsum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "n": len(values)}


@dataclass
class EvalReport:
    rows: list[ImageMetrics]
    failures: dict[str, str] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        agg = {
            "nrmse": _mean_std([r.nrmse for r in self.rows]),
            "orientation_mae": _mean_std([r.orientation_mae for r in self.rows]),
            "rmse_mm": _mean_std([r.rmse_mm for r in self.rows if r.rmse_mm is not None]),
        }
        n = agg["nrmse"]
        agg["nrmse_x100"] = {
            "mean": None if n["mean"] is None else n["mean"] * 100,
            "std": None if n["std"] is None else n["std"] * 100,
            "n": n["n"],
        }
        return agg

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "aggregate": self.aggregates(),
            "counts": {"images": len(self.rows), "failures": len(self.failures)},
            "failures": dict(self.failures),
            "settings": dict(self.settings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        header = ("image", "NRMSE(x100)", "RMSE(mm)", "MAE(deg)")
        lines = [header]

        def fmt(v: float | None) -> str:
            return "-" if v is None else f"{v:.2f}"

        for r in self.rows:
            lines.append((r.image, fmt(r.nrmse * 100), fmt(r.rmse_mm), fmt(r.orientation_mae)))
        agg = self.aggregates()

        def pm(key: str, scale: float = 1.0) -> str:
            a = agg[key]
            if a["mean"] is None:
                return "-"
            return f"{a['mean'] * scale:.2f}±{a['std'] * scale:.2f}"

        lines.append(("mean±std", pm("nrmse", 100), pm("rmse_mm"), pm("orientation_mae")))
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = []
        for i, row in enumerate(lines):
            out.append("  ".join(cell.ljust(widths[j]) if j == 0 else cell.rjust(widths[j])
                                 for j, cell in enumerate(row)))
            if i == 0 or i == len(lines) - 2:
                out.append("  ".join("-" * w for w in widths))
        for ident, msg in self.failures.items():
            out.append(f"FAILED {ident}: {msg}")
        return "\n".join(out) + "\n"


def evaluate_image(image_id: str, pose_xy: Point, theta_deg: float, ann: AnnotationSet,
                   depth_refined: bool | None = None) -> ImageMetrics:
    rmse = position_rmse_mm(pose_xy, ann) if ann.mm_per_px is not None else None
    return ImageMetrics(
        image=image_id,
        nrmse=position_nrmse(pose_xy, ann),
        orientation_mae=orientation_error(theta_deg, ann, pose_xy),
        rmse_mm=rmse,
        depth_refined=depth_refined,
    )


def evaluate_batch(predictions: Sequence[tuple[str, object]], annotations: Sequence[AnnotationSet]) -> EvalReport:
    """Score ``(image id, GraspResult)`` pairs against annotation sets keyed by image id."""
    if not predictions:
        raise EvalError("no predictions to evaluate")
    by_id = {a.image: a for a in annotations}
    missing = [ident for ident, _ in predictions if ident not in by_id]
    if missing:
        raise EvalError(f"no annotation for image ids: {', '.join(missing)}")
    rows = []
    for ident, result in predictions:
        pose = result.pose
        refined = None
        if getattr(result, "diagnostics", None) is not None:
            refined = result.diagnostics.get("depth_refinement_enabled")
        rows.append(evaluate_image(ident, Point(float(pose.x), float(pose.y)), pose.theta_deg, by_id[ident], refined))
    return EvalReport(rows)
