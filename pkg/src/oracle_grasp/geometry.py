"""2-D primitives: rectangles, IoU, centroids, principal axes and mod-180 angles.

Rectangles use half-open pixel intervals: a mask (x0, y0, w, h) covers
columns [x0, x0 + w) and rows [y0, y0 + h). Points are continuous image
coordinates, so the center of such a mask is (x0 + w/2, y0 + h/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# relative gap below which two eigenvalues are treated as equal
ISOTROPY_RTOL = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def __add__(self, other: Point) -> Point:
        return Point(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Point) -> Point:
        return Point(self.x - other.x, self.y - other.y)

    def distance(self, other: Point) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class RectMask:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"degenerate rectangle {self.width}x{self.height}")

    @property
    def x1(self) -> int:
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        return self.y0 + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> Point:
        return Point(self.x0 + self.width / 2.0, self.y0 + self.height / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains_point(self, p: Point) -> bool:
        return self.x0 <= p.x < self.x1 and self.y0 <= p.y < self.y1

    def contains_rect(self, other: RectMask) -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.width, self.height)


@dataclass(frozen=True)
class PrincipalAxis:
    direction: tuple[float, float]
    eigenvalues: tuple[float, float]
    anisotropy: float
    isotropic: bool = False

    @property
    def angle_deg(self) -> float:
        return angle_from_vector(self.direction)


def rect_intersection(a: RectMask, b: RectMask) -> RectMask | None:
    x0 = max(a.x0, b.x0)
    y0 = max(a.y0, b.y0)
    x1 = min(a.x1, b.x1)
    y1 = min(a.y1, b.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return RectMask(x0, y0, x1 - x0, y1 - y0)


def rect_iou(a: RectMask, b: RectMask) -> float:
    inter = rect_intersection(a, b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union


def bounding_box(rects: Iterable[RectMask]) -> RectMask:
    rects = list(rects)
    if not rects:
        raise GeometryError("empty rectangle set")
    x0 = min(r.x0 for r in rects)
    y0 = min(r.y0 for r in rects)
    x1 = max(r.x1 for r in rects)
    y1 = max(r.y1 for r in rects)
    return RectMask(x0, y0, x1 - x0, y1 - y0)


def _as_array(points: Sequence[Point]) -> np.ndarray:
    return np.array([[p.x, p.y] for p in points], dtype=float).reshape(-1, 2)


def centroid(points: Sequence[Point]) -> Point:
    if not points:
        raise GeometryError("empty point set")
    xs = math.fsum(p.x for p in points) / len(points)
    ys = math.fsum(p.y for p in points) / len(points)
    return Point(xs, ys)


def principal_axis(points: Sequence[Point], eps: float = 1e-12) -> PrincipalAxis:
    """Principal axis of a planar point set.

    Uses the population covariance (divide by n). When the two eigenvalues
    coincide within ``ISOTROPY_RTOL`` the direction is undefined; we return
    (1, 0) with anisotropy 1 and ``isotropic=True``.
    """
    if len(points) < 2:
        raise GeometryError("degenerate point set")
    pts = _as_array(points)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    minor, major = (max(float(v), 0.0) for v in evals)
    scale = max(major, eps)
    if major - minor <= ISOTROPY_RTOL * scale:
        return PrincipalAxis((1.0, 0.0), (major, minor), 1.0, isotropic=True)
    v = evecs[:, 1]
    v = v / np.linalg.norm(v)
    return PrincipalAxis((float(v[0]), float(v[1])), (major, minor), major / (minor + eps))


def normalize_angle_mod180(deg: float) -> float:
    a = math.fmod(deg, 180.0)
    if a < 0:
        a += 180.0
    # fmod can land exactly on 180 after the shift for tiny negatives
    return 0.0 if a >= 180.0 else a


def angle_from_vector(v: Sequence[float]) -> float:
    vx, vy = float(v[0]), float(v[1])
    if vx == 0.0 and vy == 0.0:
        raise GeometryError("zero vector has no angle")
    return normalize_angle_mod180(math.degrees(math.atan2(vy, vx)))


def signed_angle_mod180(deg: float) -> float:
    """Map an angle onto (-90, 90] under mod-180 equivalence."""
    a = normalize_angle_mod180(deg)
    return a - 180.0 if a > 90.0 else a


def angular_distance_mod180(a: float, b: float) -> float:
    d = normalize_angle_mod180(a - b)
    return min(d, 180.0 - d)


def max_spread(points: Sequence[Point], center: Point) -> float:
    if not points:
        raise GeometryError("empty point set")
    return max(p.distance(center) for p in points)


def rotate_point(p: Point, angle_deg: float, about: Point) -> Point:
    """Rotate ``p`` by ``angle_deg`` about ``about`` in image coordinates (y down)."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    dx, dy = p.x - about.x, p.y - about.y
    return Point(about.x + c * dx - s * dy, about.y + s * dx + c * dy)
