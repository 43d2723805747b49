"""Depth-based grasp position refinement.

The depth at the unrefined grasp pixel is split into evenly spaced probe
depths (1/w, 2/w, ..., 1 of it). Each probe depth defines a disc around the
pixel whose radius is the gripper clearance projected at that depth. The
refined grasp is the closest-to-camera valid pixel found in any disc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Point
from .io import DepthMap

FALLBACK_RADIUS_PX = 5.0


class DepthError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float

    def __post_init__(self) -> None:
        if not self.focal_length_px > 0:
            raise DepthError("focal length must be positive")


@dataclass(frozen=True)
class GripperSpec:
    clearance_radius_m: float

    def __post_init__(self) -> None:
        if not self.clearance_radius_m > 0:
            raise DepthError("clearance radius must be positive")


@dataclass(frozen=True)
class RefinementResult:
    point: Point  # integer pixel coordinates
    depth_mm: float
    start_depth_mm: float
    refined: bool
    radii_px: tuple[float, ...] = ()
    note: str = ""


def clearance_radius_px(focal_px: float, r_ee_m: float, z_m: float) -> float:
    if not z_m > 0:
        raise DepthError("invalid depth")
    return focal_px * r_ee_m / z_m


def _disc_mask(shape: tuple[int, int], cx: int, cy: int, radius: float):
    """Bounding slices and boolean disc (pixel-center inclusion) clipped to ``shape``."""
    h, w = shape
    r = int(math.floor(radius))
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    ys = np.arange(y0, y1)[:, None]
    xs = np.arange(x0, x1)[None, :]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return (slice(y0, y1), slice(x0, x1)), d2, d2 <= radius * radius


def min_depth_in_disc(depth: DepthMap, center: Point, radius: float) -> tuple[float, Point] | None:
    """Smallest valid depth within ``radius`` of ``center``.

    Ties resolve to the pixel nearest the center, then row-major order.
    """
    cx, cy = int(round(center.x)), int(round(center.y))
    if not (0 <= cx < depth.width and 0 <= cy < depth.height):
        raise DepthError(f"center ({cx}, {cy}) outside depth map")
    (sy, sx), d2, inside = _disc_mask(depth.values.shape, cx, cy, radius)
    vals = depth.values[sy, sx]
    ok = inside & np.isfinite(vals)
    if not ok.any():
        return None
    zmin = vals[ok].min()
    cand = ok & (vals == zmin)
    rows, cols = np.nonzero(cand)
    dist = d2[rows, cols]
    # lexsort: last key is primary
    order = np.lexsort((cols, rows, dist))
    k = order[0]
    return float(zmin), Point(float(cols[k] + sx.start), float(rows[k] + sy.start))


def depth_at(depth: DepthMap, p: Point) -> float | None:
    """Depth at ``p``, falling back to the largest valid depth within 5 px."""
    cx, cy = int(round(p.x)), int(round(p.y))
    z = depth.values[cy, cx]
    if np.isfinite(z):
        return float(z)
    (sy, sx), _, inside = _disc_mask(depth.values.shape, cx, cy, FALLBACK_RADIUS_PX)
    vals = depth.values[sy, sx]
    ok = inside & np.isfinite(vals)
    if not ok.any():
        return None
    return float(vals[ok].max())


def refine_grasp(
    depth: DepthMap,
    p: Point,
    intrinsics: CameraIntrinsics,
    gripper: GripperSpec,
    samples: int = 10,
) -> RefinementResult:
    if samples < 1:
        raise DepthError("need at least one depth sample")
    cx, cy = int(round(p.x)), int(round(p.y))
    if not (0 <= cx < depth.width and 0 <= cy < depth.height):
        raise DepthError(f"grasp point ({p.x}, {p.y}) outside the depth map")
    p = Point(float(cx), float(cy))
    start_depth = depth_at(depth, p)
    if start_depth is None:
        return RefinementResult(p, math.nan, math.nan, False, note="no valid depth near grasp point")

    best: tuple[float, Point] | None = None
    radii = []
    for j in range(1, samples + 1):
        probe_depth = j / samples * start_depth
        r = clearance_radius_px(intrinsics.focal_length_px, gripper.clearance_radius_m, probe_depth / 1000.0)
        radii.append(r)
        found = min_depth_in_disc(depth, p, r)
        # strict comparison keeps the earliest j on ties; every disc shares the
        # same center, so the tie-broken pixel is the same in all of them
        if found is not None and (best is None or found[0] < best[0]):
            best = found
    if best is None:
        return RefinementResult(p, start_depth, start_depth, False, tuple(radii), note="no valid pixel in any disc")
    return RefinementResult(best[1], best[0], start_depth, True, tuple(radii))
