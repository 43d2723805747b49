"""Grid discretization of images, grid overlays, crop windows and frame transforms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .geometry import Point, RectMask, bounding_box, rotate_point

log = logging.getLogger(__name__)

GRID_MIN, GRID_MAX = 3, 9
FILL_GRAY = (128, 128, 128)


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    columns: int
    rows: int
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        if self.columns < 1 or self.rows < 1:
            raise TilingError(f"grid {self.columns}x{self.rows} must be at least 1x1")
        if self.columns > self.image_width or self.rows > self.image_height:
            raise TilingError(
                f"grid {self.columns}x{self.rows} exceeds image "
                f"{self.image_width}x{self.image_height}"
            )

    @property
    def n_cells(self) -> int:
        return self.columns * self.rows

    def col_bounds(self) -> list[int]:
        return _bounds(self.image_width, self.columns)

    def row_bounds(self) -> list[int]:
        return _bounds(self.image_height, self.rows)

    def cell_of_point(self, p: Point) -> int:
        """Linear index of the cell containing ``p``; points outside clamp to the edge."""
        xs, ys = self.col_bounds(), self.row_bounds()
        col = _locate(xs, p.x)
        row = _locate(ys, p.y)
        return row * self.columns + col


def _bounds(length: int, parts: int) -> list[int]:
    # round-half-up of i * length / parts, in exact integer arithmetic
    return [(2 * i * length + parts) // (2 * parts) for i in range(parts + 1)]


def _locate(bounds: list[int], v: float) -> int:
    n = len(bounds) - 1
    for i in range(n):
        if v < bounds[i + 1]:
            return i
    return n - 1


def tile(grid: GridSpec) -> list[RectMask]:
    xs, ys = grid.col_bounds(), grid.row_bounds()
    return [
        RectMask(xs[c], ys[r], xs[c + 1] - xs[c], ys[r + 1] - ys[r])
        for r in range(grid.rows)
        for c in range(grid.columns)
    ]


def cell_mask(grid: GridSpec, linear_index: int) -> RectMask:
    if not 0 <= linear_index < grid.n_cells:
        raise TilingError(f"cell index out of bounds: {linear_index} not in [0, {grid.n_cells})")
    col, row = linear_index % grid.columns, linear_index // grid.columns
    xs, ys = grid.col_bounds(), grid.row_bounds()
    return RectMask(xs[col], ys[row], xs[col + 1] - xs[col], ys[row + 1] - ys[row])


# ---------------------------------------------------------------------------
# overlay


@dataclass(frozen=True)
class OverlayStyle:
    mode: str = "grid"  # "grid" or "none"
    color: tuple[int, int, int] = (255, 0, 0)
    thickness: int = 2
    labels: bool = True
    label_color: tuple[int, int, int] = (255, 255, 255)
    label_background: tuple[int, int, int] = (0, 0, 0)


def _band(boundary: int, thickness: int, limit: int) -> tuple[int, int]:
    lo = max(boundary - thickness // 2, 0)
    hi = min(lo + thickness, limit)
    return lo, hi


@lru_cache(maxsize=1)
def _font():
    return ImageFont.load_default()


@lru_cache(maxsize=1024)
def _label_patch(text: str, color: tuple[int, int, int], background: tuple[int, int, int]) -> np.ndarray:
    """Rendered label with a one-pixel background border, cached per text."""
    font = _font()
    probe = ImageDraw.Draw(Image.new("RGB", (1, 1)))
    left, top, right, bottom = probe.textbbox((0, 0), text, font=font)
    im = Image.new("RGB", (right - left + 2, bottom - top + 2), background)
    ImageDraw.Draw(im).text((1 - left, 1 - top), text, fill=color, font=font)
    patch = np.asarray(im, dtype=np.uint8).copy()
    patch.setflags(write=False)
    return patch


def render_grid_overlay(
    image: np.ndarray, grid: GridSpec, style: OverlayStyle = OverlayStyle()
) -> np.ndarray:
    """Draw grid lines and cell labels onto a copy of ``image``.

    Labels read ``"<index> (<col>,<row>)"``. If that does not fit inside a
    cell the bare index is tried, and otherwise the label is dropped with a
    logged warning.
    """
    h, w = image.shape[:2]
    if (w, h) != (grid.image_width, grid.image_height):
        raise TilingError(f"grid is for {grid.image_width}x{grid.image_height}, image is {w}x{h}")
    out = np.array(image, dtype=np.uint8, copy=True)
    if style.mode == "none":
        return out

    if style.thickness > 0:
        color = np.array(style.color, dtype=np.uint8)
        for b in grid.col_bounds()[1:-1]:
            lo, hi = _band(b, style.thickness, w)
            out[:, lo:hi] = color
        for b in grid.row_bounds()[1:-1]:
            lo, hi = _band(b, style.thickness, h)
            out[lo:hi, :] = color

    if style.labels:
        pad = (style.thickness + 1) // 2 + 1
        dropped = 0
        for idx, cell in enumerate(tile(grid)):
            col, row = idx % grid.columns, idx // grid.columns
            for text in (f"{idx} ({col},{row})", str(idx)):
                patch = _label_patch(text, style.label_color, style.label_background)
                ph, pw = patch.shape[:2]
                if pw + 2 * pad <= cell.width and ph + 2 * pad <= cell.height:
                    x, y = cell.x0 + pad, cell.y0 + pad
                    out[y:y + ph, x:x + pw] = patch
                    break
            else:
                dropped += 1
        if dropped:
            log.warning("grid %dx%d: %d cell labels omitted (cells too small)",
                        grid.columns, grid.rows, dropped)
    return out


# ---------------------------------------------------------------------------
# crops and frames


@dataclass(frozen=True)
class CropStep:
    x0: int
    y0: int

    def forward(self, p: Point) -> Point:
        return Point(p.x - self.x0, p.y - self.y0)

    def inverse(self, p: Point) -> Point:
        return Point(p.x + self.x0, p.y + self.y0)


@dataclass(frozen=True)
class RotationStep:
    """Rotation about the source image center onto an expanded canvas."""

    angle_deg: float
    src_size: tuple[int, int]
    dst_size: tuple[int, int]

    @property
    def _src_center(self) -> Point:
        return Point(self.src_size[0] / 2.0, self.src_size[1] / 2.0)

    @property
    def _dst_center(self) -> Point:
        return Point(self.dst_size[0] / 2.0, self.dst_size[1] / 2.0)

    def forward(self, p: Point) -> Point:
        q = rotate_point(p, self.angle_deg, self._src_center)
        return q - self._src_center + self._dst_center

    def inverse(self, p: Point) -> Point:
        q = p - self._dst_center + self._src_center
        return rotate_point(q, -self.angle_deg, self._src_center)


Step = Union[CropStep, RotationStep]


@dataclass(frozen=True)
class FrameTransform:
    """Chain of steps taking root-image coordinates into a derived frame."""

    steps: tuple[Step, ...] = field(default_factory=tuple)

    @classmethod
    def identity(cls) -> FrameTransform:
        return cls(())

    def then(self, step: Step) -> FrameTransform:
        return FrameTransform(self.steps + (step,))

    def forward(self, p: Point) -> Point:
        for s in self.steps:
            p = s.forward(p)
        return p

    def to_original(self, p: Point) -> Point:
        for s in reversed(self.steps):
            p = s.inverse(p)
        return p

    @property
    def is_identity(self) -> bool:
        return not self.steps

    def describe(self) -> list[dict]:
        out = []
        for s in self.steps:
            if isinstance(s, CropStep):
                out.append({"kind": "crop", "offset": [s.x0, s.y0]})
            else:
                out.append({"kind": "rotation", "angle_deg": s.angle_deg,
                            "src_size": list(s.src_size), "dst_size": list(s.dst_size)})
        return out


def to_original_frame(p: Point, t: FrameTransform) -> Point:
    return t.to_original(p)


@dataclass(frozen=True)
class CropWindow:
    rect: RectMask
    parent_size: tuple[int, int]

    def step(self) -> CropStep:
        return CropStep(self.rect.x0, self.rect.y0)


def crop_window_from_masks(
    masks: list[RectMask], image_size: tuple[int, int], margin_frac: float = 0.10
) -> CropWindow:
    """Bounding box of ``masks`` grown by ``margin_frac`` of its diagonal per side."""
    if not masks:
        raise TilingError("cannot crop around an empty mask set")
    w, h = image_size
    box = bounding_box(masks)
    grow = margin_frac * box.diagonal
    x0 = max(0, math.floor(box.x0 - grow))
    y0 = max(0, math.floor(box.y0 - grow))
    x1 = min(w, math.ceil(box.x1 + grow))
    y1 = min(h, math.ceil(box.y1 + grow))
    return CropWindow(RectMask(x0, y0, x1 - x0, y1 - y0), (w, h))


def crop_image(image: np.ndarray, window: CropWindow) -> np.ndarray:
    r = window.rect
    return np.ascontiguousarray(image[r.y0:r.y1, r.x0:r.x1])


def rotated_canvas_size(size: tuple[int, int], angle_deg: float) -> tuple[int, int]:
    w, h = size
    t = math.radians(angle_deg)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    return (
        max(1, math.ceil(w * c + h * s - 1e-9)),
        max(1, math.ceil(w * s + h * c - 1e-9)),
    )


def rotate_image(
    image: np.ndarray, angle_deg: float, fill: tuple[int, ...] = FILL_GRAY
) -> tuple[np.ndarray, RotationStep]:
    """Rotate ``image`` by ``angle_deg`` (image coordinates, y down) onto an expanded canvas.

    Nearest-neighbour sampling at pixel centers. The returned step maps
    source-frame points into the rotated frame; its ``inverse`` maps back.
    """
    if abs(angle_deg) > 180:
        raise TilingError(f"rotation angle {angle_deg} outside [-180, 180]")
    h, w = image.shape[:2]
    dst_w, dst_h = rotated_canvas_size((w, h), angle_deg)
    step = RotationStep(float(angle_deg), (w, h), (dst_w, dst_h))
    if angle_deg == 0 and (dst_w, dst_h) == (w, h):
        return np.array(image, copy=True), step

    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    xs = np.arange(dst_w) + 0.5 - dst_w / 2.0
    ys = np.arange(dst_h) + 0.5 - dst_h / 2.0
    gx, gy = np.meshgrid(xs, ys)
    # inverse rotation of each destination pixel center
    sx = c * gx + s * gy + w / 2.0
    sy = -s * gx + c * gy + h / 2.0
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)

    out_shape = (dst_h, dst_w) + image.shape[2:]
    out = np.empty(out_shape, dtype=image.dtype)
    out[...] = np.array(fill, dtype=image.dtype)[: image.shape[2]] if image.ndim == 3 else fill[0]
    out[valid] = image[iy[valid], ix[valid]]
    return out, step
