"""Marking-point grid encoding.

A prediction grid is an ``(S, S, 9)`` array indexed ``[row, col, channel]``
with the per-cell channel layout::

    0 C        confidence
    1 x_off    horizontal offset inside the cell, [0, 1) from the left edge
    2 y_off    vertical offset inside the cell, [0, 1) from the top edge
    3 cos t1   4 sin t1
    5 cos t2   6 sin t2
    7 s        1 = T-shaped, 0 = L-shaped
    8 t        1 = slanted, 0 = perpendicular

Angles are in degrees, measured with ``atan2(dy, dx)`` in image coordinates
(y pointing down), and kept in ``[0, 360)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .errors import LabelAccessError, PointOutOfBounds, TwoPointsOneCell

GRID_SIZE = 16
IMAGE_SIZE = 512
NUM_CHANNELS = 9

CH_CONF = 0
CH_X, CH_Y = 1, 2
CH_COS1, CH_SIN1, CH_COS2, CH_SIN2 = 3, 4, 5, 6
CH_SHAPE, CH_TYPE = 7, 8

SHAPES = ("T", "L")
POINT_TYPES = ("perpendicular", "slanted")
SCENES = (
    "indoor_low_light",
    "indoor_bright_light",
    "outdoor_daylight",
    "outdoor_rainy",
    "outdoor_shadow",
    "outdoor_night",
    "slanted",
    "damaged",
)


def canonical_angle(deg: float) -> float:
    a = math.fmod(float(deg), 360.0)
    if a < 0.0:
        a += 360.0
    # fmod of a tiny negative number can round up to exactly 360
    if a >= 360.0:
        a = 0.0
    return a


def angle_diff(a: float, b: float) -> float:
    """Absolute angular difference in degrees, in [0, 180]."""
    d = abs(canonical_angle(a) - canonical_angle(b))
    return min(d, 360.0 - d)


def direction_deg(x0: float, y0: float, x1: float, y1: float) -> float:
    return canonical_angle(math.degrees(math.atan2(y1 - y0, x1 - x0)))


@dataclass(frozen=True)
class MarkingPoint:
    x: float
    y: float
    theta1: float
    theta2: float
    shape: str = "L"
    ptype: str = "perpendicular"
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta1", canonical_angle(self.theta1))
        object.__setattr__(self, "theta2", canonical_angle(self.theta2))
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.ptype not in POINT_TYPES:
            raise ValueError(f"ptype must be one of {POINT_TYPES}, got {self.ptype!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def xy(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class ParkingSlot:
    """Entrance line between two marking points.

    ``p1`` is the lexicographically smaller endpoint and ``theta_s`` the
    direction from ``p1`` to ``p2``; use :meth:`from_points` to get that
    ordering for free.
    """

    p1: tuple
    p2: tuple
    theta_s: float
    ptype: str = "perpendicular"
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p1", (float(self.p1[0]), float(self.p1[1])))
        object.__setattr__(self, "p2", (float(self.p2[0]), float(self.p2[1])))
        object.__setattr__(self, "theta_s", canonical_angle(self.theta_s))
        if self.p1 == self.p2:
            raise ValueError("slot endpoints must differ")
        if self.ptype not in POINT_TYPES:
            raise ValueError(f"ptype must be one of {POINT_TYPES}, got {self.ptype!r}")

    @classmethod
    def from_points(cls, a, b, ptype="perpendicular", confidence=1.0):
        a = (float(a[0]), float(a[1]))
        b = (float(b[0]), float(b[1]))
        p1, p2 = (a, b) if a <= b else (b, a)
        return cls(p1, p2, direction_deg(*p1, *p2), ptype, confidence)

    @property
    def length(self):
        return math.hypot(self.p2[0] - self.p1[0], self.p2[1] - self.p1[1])


class AnnotatedImage:
    """An image with its ground truth.

    When ``labeled`` is False the annotations stay in memory but reading
    ``points`` or ``slots`` bumps ``label_reads`` (and raises if ``strict``).
    Training code must only ever touch ``image`` for unlabeled samples.
    """

    def __init__(self, image, points, slots, scene="outdoor_daylight", labeled=True, name=""):
        self.image = image
        self._points = list(points)
        self._slots = list(slots)
        self.scene = scene
        self.labeled = labeled
        self.name = name
        self.label_reads = 0
        self.strict = False

    def _touch(self):
        if not self.labeled:
            self.label_reads += 1
            if self.strict:
                raise LabelAccessError(f"ground truth of unlabeled sample {self.name!r} was read")

    @property
    def points(self) -> List[MarkingPoint]:
        self._touch()
        return self._points

    @property
    def slots(self) -> List[ParkingSlot]:
        self._touch()
        return self._slots

    def as_unlabeled(self) -> "AnnotatedImage":
        return AnnotatedImage(self.image, self._points, self._slots, self.scene, False, self.name)

    def as_labeled(self) -> "AnnotatedImage":
        return AnnotatedImage(self.image, self._points, self._slots, self.scene, True, self.name)

    def __repr__(self):
        return (f"AnnotatedImage(name={self.name!r}, scene={self.scene!r}, "
                f"labeled={self.labeled}, n_points={len(self._points)}, n_slots={len(self._slots)})")


def _cell_of(p: MarkingPoint, grid_size: int, image_size: float):
    if not (0.0 <= p.x < image_size and 0.0 <= p.y < image_size):
        raise PointOutOfBounds(f"point ({p.x}, {p.y}) outside a {image_size}px image")
    cell = image_size / grid_size
    col = min(int(p.x // cell), grid_size - 1)
    row = min(int(p.y // cell), grid_size - 1)
    return row, col, cell


def encode_ground_truth(points: Sequence[MarkingPoint], grid_size: int = GRID_SIZE,
                        image_size: float = IMAGE_SIZE) -> np.ndarray:
    grid = np.zeros((grid_size, grid_size, NUM_CHANNELS), dtype=np.float64)
    for p in points:
        row, col, cell = _cell_of(p, grid_size, image_size)
        if grid[row, col, CH_CONF] != 0.0:
            raise TwoPointsOneCell(f"two ground-truth points fall in cell (row={row}, col={col})")
        t1, t2 = math.radians(p.theta1), math.radians(p.theta2)
        grid[row, col] = (
            1.0,
            p.x / cell - col,
            p.y / cell - row,
            math.cos(t1), math.sin(t1),
            math.cos(t2), math.sin(t2),
            1.0 if p.shape == "T" else 0.0,
            1.0 if p.ptype == "slanted" else 0.0,
        )
    return grid


def _decode_angle(c: float, s: float) -> float:
    norm = math.hypot(c, s)
    if norm == 0.0:
        return 0.0
    return canonical_angle(math.degrees(math.atan2(s / norm, c / norm)))


def decode_cell(grid: np.ndarray, row: int, col: int, image_size: float = IMAGE_SIZE) -> MarkingPoint:
    v = grid[row, col]
    cell = image_size / grid.shape[1]
    return MarkingPoint(
        x=(col + float(v[CH_X])) * cell,
        y=(row + float(v[CH_Y])) * cell,
        theta1=_decode_angle(float(v[CH_COS1]), float(v[CH_SIN1])),
        theta2=_decode_angle(float(v[CH_COS2]), float(v[CH_SIN2])),
        shape="T" if v[CH_SHAPE] >= 0.5 else "L",
        ptype="slanted" if v[CH_TYPE] >= 0.5 else "perpendicular",
        confidence=float(np.clip(v[CH_CONF], 0.0, 1.0)),
    )


def decode_grid(grid: np.ndarray, conf_threshold: float = 0.5,
                image_size: float = IMAGE_SIZE) -> List[MarkingPoint]:
    """Return one point per cell whose confidence reaches ``conf_threshold``.

    Points come out in row-major cell order.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != NUM_CHANNELS or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"expected an (S, S, {NUM_CHANNELS}) grid, got {grid.shape}")
    rows, cols = np.nonzero(grid[:, :, CH_CONF] >= conf_threshold)
    return [decode_cell(grid, int(r), int(c), image_size) for r, c in zip(rows, cols)]


def with_confidence(p: MarkingPoint, confidence: float) -> MarkingPoint:
    return replace(p, confidence=confidence)
