"""From a prediction grid to parking slots: threshold, suppress, pair."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .types import IMAGE_SIZE, MarkingPoint, ParkingSlot, angle_diff, decode_grid, direction_deg


@dataclass
class TemplateConfig:
    """Geometry accepted as an entrance line.

    All defaults are calibrated on the synthetic generator (slot widths of
    120-300 px on a 512 px / 10 m view); recalibrate for real data.
    """

    conf_threshold: float = 0.5
    suppress_radius: float = 16.0
    perp_length_range: Tuple[float, float] = (120.0, 300.0)
    slant_length_range: Tuple[float, float] = (120.0, 300.0)
    direction_tolerance: float = 10.0
    # acute angle between separating line and entrance line for slanted slots
    slant_angle_range: Tuple[float, float] = (30.0, 60.0)
    midline_clearance: bool = True

    def __post_init__(self):
        for name in ("perp_length_range", "slant_length_range", "slant_angle_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} must be a non-degenerate range, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        if self.direction_tolerance <= 0 or self.suppress_radius < 0:
            raise ConfigError("direction_tolerance must be > 0 and suppress_radius >= 0")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError("conf_threshold must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def suppress(points: Sequence[MarkingPoint], radius: float) -> List[MarkingPoint]:
    """Greedy NMS: keep points by descending confidence, ties in input order."""
    order = sorted(range(len(points)), key=lambda i: -points[i].confidence)
    kept: List[MarkingPoint] = []
    r2 = radius * radius
    for i in order:
        p = points[i]
        if all((p.x - q.x) ** 2 + (p.y - q.y) ** 2 >= r2 for q in kept):
            kept.append(p)
    return kept


def extract_marking_points(grid, cfg: TemplateConfig | None = None,
                           image_size: float = IMAGE_SIZE) -> List[MarkingPoint]:
    cfg = cfg or TemplateConfig()
    return suppress(decode_grid(grid, cfg.conf_threshold, image_size), cfg.suppress_radius)


def _point_segment_dist(p, a, b) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    l2 = dx * dx + dy * dy
    t = 0.0 if l2 == 0 else min(max(((p[0] - ax) * dx + (p[1] - ay) * dy) / l2, 0.0), 1.0)
    return math.hypot(p[0] - ax - t * dx, p[1] - ay - t * dy)


def _acute(a: float, b: float) -> float:
    """Angle between two undirected lines, in [0, 90]."""
    d = angle_diff(a, b)
    return min(d, 180.0 - d)


def _entrance_ok(p: MarkingPoint, toward: float, tol: float) -> bool:
    # an L corner only has the entrance edge on its partner's side; a T corner has both
    if p.shape == "L":
        return angle_diff(p.theta1, toward) < tol
    return _acute(p.theta1, toward) < tol


def pair_ok(a: MarkingPoint, b: MarkingPoint, cfg: TemplateConfig) -> bool:
    if a.ptype != b.ptype:
        return False
    length = math.hypot(b.x - a.x, b.y - a.y)
    lo, hi = cfg.slant_length_range if a.ptype == "slanted" else cfg.perp_length_range
    if not lo <= length <= hi:
        return False
    tol = cfg.direction_tolerance
    e_ab = direction_deg(a.x, a.y, b.x, b.y)
    e_ba = direction_deg(b.x, b.y, a.x, a.y)
    if not (_entrance_ok(a, e_ab, tol) and _entrance_ok(b, e_ba, tol)):
        return False
    # both separating lines leave towards the same side, roughly parallel
    if angle_diff(a.theta2, b.theta2) >= tol:
        return False
    crossings = (_acute(a.theta2, e_ab), _acute(b.theta2, e_ab))
    if a.ptype == "perpendicular":
        return all(abs(90.0 - c) < tol for c in crossings)
    s_lo, s_hi = cfg.slant_angle_range
    return all(s_lo - tol < c < s_hi + tol for c in crossings)


def pair_slots(points: Sequence[MarkingPoint], cfg: TemplateConfig | None = None) -> List[ParkingSlot]:
    """Template-match every unordered pair of points into entrance lines.

    The result is sorted by ``(p1, p2)`` and does not depend on input order.
    """
    cfg = cfg or TemplateConfig()
    pts = sorted(points, key=lambda p: (p.x, p.y, p.theta1, p.theta2, -p.confidence))
    slots = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            a, b = pts[i], pts[j]
            if not pair_ok(a, b, cfg):
                continue
            if cfg.midline_clearance and any(
                    _point_segment_dist(c.xy, a.xy, b.xy) < cfg.suppress_radius
                    for k, c in enumerate(pts) if k != i and k != j):
                continue
            slots.append(ParkingSlot.from_points(a.xy, b.xy, a.ptype, min(a.confidence, b.confidence)))
    slots.sort(key=lambda s: (s.p1, s.p2))
    return slots


def detect_slots(grid, cfg: TemplateConfig | None = None, image_size: float = IMAGE_SIZE):
    """``(points, slots)`` for one prediction grid."""
    cfg = cfg or TemplateConfig()
    points = extract_marking_points(np.asarray(grid), cfg, image_size)
    return points, pair_slots(points, cfg)
