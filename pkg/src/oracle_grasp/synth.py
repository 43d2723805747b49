"""Seeded synthetic RGB-D scenes with ground-truth grasp annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import AnnotationSet, GraspAnnotation
from .geometry import Point
from .io import DatasetManifest, DepthMap, ManifestEntry, canonical_json, save_depth, save_manifest, save_rgb

SCENES = ("handle-hole", "bar", "blob")
DEFAULT_FOCAL_PX = 500.0
BACKGROUND_MM = 1000.0


@dataclass(frozen=True)
class SynthScene:
    name: str
    rgb: np.ndarray
    depth: DepthMap
    annotation: AnnotationSet


def _canvas(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    base = np.array([200, 190, 170], dtype=np.int16)
    noise = rng.integers(-6, 7, size=(height, width, 3), dtype=np.int16)
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def handle_hole(seed: int = 0, width: int = 320, height: int = 240,
                inner: float = 18.0, outer: float = 30.0) -> SynthScene:
    """A ring-shaped handle seen from above: the hole shows the far background."""
    rng = np.random.default_rng(seed)
    cx = width / 2 + float(rng.integers(-20, 21))
    cy = height / 2 + float(rng.integers(-15, 16))
    rgb = _canvas(rng, width, height)
    xs, ys = _grid(width, height)
    r = np.hypot(xs - cx, ys - cy)
    ring = (r >= inner) & (r <= outer)
    rgb[ring] = (40, 60, 160)
    depth = np.full((height, width), BACKGROUND_MM)
    depth[ring] = 400.0
    mid = (inner + outer) / 2
    ann = AnnotationSet(
        image="handle-hole",
        grasps=(GraspAnnotation(Point(cx, cy - mid), 0.0), GraspAnnotation(Point(cx, cy + mid), 0.0)),
        d_px=2 * outer,
        mm_per_px=400.0 / DEFAULT_FOCAL_PX,
    )
    return SynthScene("handle-hole", rgb, DepthMap.from_millimeters(depth), ann)


def bar(seed: int = 0, angle_deg: float = 30.0, width: int = 320, height: int = 240,
        length: float = 160.0, thickness: float = 24.0) -> SynthScene:
    rng = np.random.default_rng(seed)
    cx = width / 2 + float(rng.integers(-15, 16))
    cy = height / 2 + float(rng.integers(-10, 11))
    rgb = _canvas(rng, width, height)
    xs, ys = _grid(width, height)
    t = math.radians(angle_deg)
    along = (xs - cx) * math.cos(t) + (ys - cy) * math.sin(t)
    across = -(xs - cx) * math.sin(t) + (ys - cy) * math.cos(t)
    body = (np.abs(along) <= length / 2) & (np.abs(across) <= thickness / 2)
    rgb[body] = (150, 40, 40)
    depth = np.full((height, width), BACKGROUND_MM)
    depth[body] = 600.0
    ann = AnnotationSet(
        image="bar",
        grasps=(GraspAnnotation(Point(cx, cy), float(angle_deg) % 180.0),),
        d_px=math.hypot(length, thickness),
        mm_per_px=600.0 / DEFAULT_FOCAL_PX,
    )
    return SynthScene("bar", rgb, DepthMap.from_millimeters(depth), ann)


def blob(seed: int = 0, width: int = 320, height: int = 240) -> SynthScene:
    rng = np.random.default_rng(seed)
    cx = width / 2 + float(rng.integers(-20, 21))
    cy = height / 2 + float(rng.integers(-15, 16))
    a, b = float(rng.uniform(50, 80)), float(rng.uniform(20, 35))
    angle = float(rng.uniform(0, 180))
    rgb = _canvas(rng, width, height)
    xs, ys = _grid(width, height)
    t = math.radians(angle)
    u = (xs - cx) * math.cos(t) + (ys - cy) * math.sin(t)
    v = -(xs - cx) * math.sin(t) + (ys - cy) * math.cos(t)
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    rgb[body] = (40, 140, 60)
    depth = np.full((height, width), BACKGROUND_MM)
    depth[body] = 700.0 - 50.0 * np.sqrt(np.clip(1 - (u[body] / a) ** 2 - (v[body] / b) ** 2, 0, 1))
    ann = AnnotationSet(
        image="blob",
        grasps=(GraspAnnotation(Point(cx, cy), angle),),
        d_px=2 * a,
        mm_per_px=650.0 / DEFAULT_FOCAL_PX,
    )
    return SynthScene("blob", rgb, DepthMap.from_millimeters(np.rint(depth)), ann)


def make_scene(name: str, seed: int = 0, angle_deg: float | None = None) -> SynthScene:
    if name == "handle-hole":
        return handle_hole(seed)
    if name == "bar":
        return bar(seed, 30.0 if angle_deg is None else angle_deg)
    if name == "blob":
        return blob(seed)
    raise ValueError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}")


def write_scenes(out_dir: str | Path, name: str, seed: int = 0, count: int = 1,
                 angle_deg: float | None = None) -> DatasetManifest:
    """Write ``count`` variants of a scene plus a manifest listing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        scene = make_scene(name, seed + i, angle_deg)
        ident = name if count == 1 else f"{name}-{i:03d}"
        ann = AnnotationSet(ident, scene.annotation.grasps, scene.annotation.d_px, scene.annotation.mm_per_px)
        save_rgb(out / f"{ident}.png", scene.rgb)
        save_depth(out / f"{ident}_depth.png", scene.depth)
        (out / f"{ident}.json").write_text(canonical_json(ann.to_dict()), encoding="utf-8")
        entries.append(ManifestEntry(ident, out / f"{ident}.png", out / f"{ident}_depth.png", out / f"{ident}.json"))
    manifest = DatasetManifest(tuple(entries), out.resolve())
    save_manifest(out / "manifest.json", DatasetManifest(
        tuple(ManifestEntry(e.id, e.image.resolve(), e.depth.resolve(), e.annotation.resolve()) for e in entries),
        out.resolve(),
    ))
    return manifest
