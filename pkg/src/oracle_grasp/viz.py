"""Draw a predicted grasp onto its image."""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

from .depth_refine import clearance_radius_px
from .geometry import Point
from .pipeline import GraspResult

CELL_COLOR = (255, 60, 60)
GRASP_COLOR = (30, 90, 255)
UNREFINED_COLOR = (40, 200, 40)


def draw_result(image: np.ndarray, result: GraspResult, focal_px: float | None = None,
                clearance_m: float | None = None, line_length: float | None = None) -> np.ndarray:
    """Selected cells in red, grasp point and orientation line in blue.

    When depth refinement ran, the unrefined point and its clearance circle
    are drawn in green.
    """
    pil = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(pil, "RGBA")
    for c in result.candidate_set.candidates:
        if c.stage == "rotated":
            # rotated cells are drawn as their mapped-back corners
            m = c.mask
            corners = [(m.x0, m.y0), (m.x1, m.y0), (m.x1, m.y1), (m.x0, m.y1)]
            pts = [c.frame.to_original(Point(x, y)).as_tuple() for x, y in corners]
            draw.polygon(pts, outline=CELL_COLOR + (200,))
        else:
            a = c.frame.to_original(Point(c.mask.x0, c.mask.y0))
            b = c.frame.to_original(Point(c.mask.x1, c.mask.y1))
            draw.rectangle([a.x, a.y, b.x - 1, b.y - 1], outline=CELL_COLOR + (160,))

    h, w = image.shape[:2]
    length = line_length or 0.08 * math.hypot(w, h)
    p = result.pose
    t = math.radians(p.theta_deg)
    dx, dy = math.cos(t) * length / 2, math.sin(t) * length / 2
    draw.line([p.x - dx, p.y - dy, p.x + dx, p.y + dy], fill=GRASP_COLOR, width=3)
    draw.ellipse([p.x - 4, p.y - 4, p.x + 4, p.y + 4], fill=GRASP_COLOR)

    d = result.depth
    if d is not None and focal_px and clearance_m and d.start_depth_mm == d.start_depth_mm:
        u = result.unrefined_pose
        r = clearance_radius_px(focal_px, clearance_m, d.start_depth_mm / 1000.0)
        draw.ellipse([u.x - r, u.y - r, u.x + r, u.y + r], outline=UNREFINED_COLOR, width=2)
        draw.ellipse([u.x - 3, u.y - 3, u.x + 3, u.y + 3], fill=UNREFINED_COLOR)
    return np.asarray(pil, dtype=np.uint8).copy()
