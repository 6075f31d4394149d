"""Annotated datasets: JSON sidecar IO, the 1/n split, statistics and a
synthetic bird's-eye-view scene generator."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np

from .errors import ConfigError, DanglingSlotRef, EmptyDataset, SchemaError, TwoPointsOneCell
from .types import (
    POINT_TYPES,
    SCENES,
    SHAPES,
    AnnotatedImage,
    MarkingPoint,
    ParkingSlot,
    direction_deg,
    encode_ground_truth,
)

log = logging.getLogger(__name__)

# run snapshot written by the command line tool; never an annotation sidecar
RESOLVED_CONFIG_NAME = "resolved_config.json"

# Relative scene frequencies of the real test split; "slanted" is driven by
# SynthConfig.slanted_fraction instead.
DEFAULT_SCENE_MIX = {
    "indoor_low_light": 545,
    "indoor_bright_light": 786,
    "outdoor_daylight": 1703,
    "outdoor_rainy": 323,
    "outdoor_shadow": 1389,
    "outdoor_night": 86,
    "damaged": 302,
}


# --------------------------------------------------------------------------
# statistics and splitting
# --------------------------------------------------------------------------

@dataclass
class DatasetStats:
    n_images: int
    n_slots: int
    n_slanted: int
    per_scene_counts: Dict[str, int]

    @property
    def density(self) -> float:
        return self.n_slots / self.n_images if self.n_images else 0.0

    @property
    def slanted_pct(self) -> float:
        return self.n_slanted / self.n_slots if self.n_slots else 0.0

    @property
    def n_perpendicular(self) -> int:
        return self.n_slots - self.n_slanted

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        scenes = {s: self.per_scene_counts.get(s, 0) + other.per_scene_counts.get(s, 0)
                  for s in set(self.per_scene_counts) | set(other.per_scene_counts)}
        return DatasetStats(self.n_images + other.n_images, self.n_slots + other.n_slots,
                            self.n_slanted + other.n_slanted, scenes)

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_slots": self.n_slots,
            "n_perpendicular": self.n_perpendicular,
            "n_slanted": self.n_slanted,
            "density": self.density,
            "slanted_pct": self.slanted_pct,
            "per_scene_counts": dict(self.per_scene_counts),
        }


def dataset_stats(dataset: Sequence[AnnotatedImage]) -> DatasetStats:
    if len(dataset) == 0:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    n_slots = n_slanted = 0
    scenes = Counter({s: 0 for s in SCENES})
    for item in dataset:
        slots = item.slots
        n_slots += len(slots)
        n_slanted += sum(1 for s in slots if s.ptype == "slanted")
        scenes[item.scene] += 1
    return DatasetStats(len(dataset), n_slots, n_slanted, dict(scenes))


@dataclass(frozen=True)
class SplitProtocol:
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"labeled ratio denominator must be >= 1, got {self.n}")


def labeled_count(n_images: int, n: int) -> int:
    return -(-n_images // n)


def split_semi(dataset: Sequence[AnnotatedImage], protocol: SplitProtocol):
    """Return ``(labeled, unlabeled)``; exactly ``ceil(len / n)`` items are labeled.

    Both lists keep the input order. Unlabeled items are flagged copies whose
    ground truth is guarded by a read counter.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    n_lab = labeled_count(len(dataset), protocol.n)
    perm = np.random.default_rng(protocol.seed).permutation(len(dataset))
    chosen = np.zeros(len(dataset), dtype=bool)
    chosen[perm[:n_lab]] = True
    labeled = [item.as_labeled() for item, c in zip(dataset, chosen) if c]
    unlabeled = [item.as_unlabeled() for item, c in zip(dataset, chosen) if not c]
    return labeled, unlabeled


# --------------------------------------------------------------------------
# annotation IO
# --------------------------------------------------------------------------

def annotation_to_json(item: AnnotatedImage, image_file: str) -> dict:
    points = item.points
    index = {(p.x, p.y): i for i, p in enumerate(points)}
    slots = []
    for s in item.slots:
        try:
            i1, i2 = index[s.p1], index[s.p2]
        except KeyError:
            raise DanglingSlotRef(f"{item.name}: slot endpoint is not one of the points") from None
        slots.append({"p1": i1, "p2": i2, "theta_s": s.theta_s, "type": s.ptype})
    return {
        "image": image_file,
        "scene": item.scene,
        "points": [
            {"x": p.x, "y": p.y, "theta1": p.theta1, "theta2": p.theta2,
             "shape": p.shape, "type": p.ptype}
            for p in points
        ],
        "slots": slots,
    }


def save_annotations(dataset: Sequence[AnnotatedImage], path) -> List[Path]:
    """Write ``<name>.png`` plus a ``<name>.json`` sidecar per image."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, item in enumerate(dataset):
        stem = item.name or f"{i:06d}"
        image_file = f"{stem}.png"
        if not cv2.imwrite(str(out / image_file), item.image):
            raise OSError(f"failed to write {out / image_file}")
        sidecar = out / f"{stem}.json"
        sidecar.write_text(json.dumps(annotation_to_json(item, image_file), indent=1))
        written.append(sidecar)
    return written


def _need(record, key, fname, kind=None):
    if key not in record:
        raise SchemaError(f"{fname}: missing field {key!r}")
    value = record[key]
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise SchemaError(f"{fname}: field {key!r} has wrong type {type(value).__name__}")
    return value


def parse_annotation(record: dict, fname: str, width: int, height: int):
    """Validate one sidecar record; returns ``(scene, points, slots)``."""
    num = (int, float)
    scene = _need(record, "scene", fname, str)
    if scene not in SCENES:
        raise SchemaError(f"{fname}: unknown scene tag {scene!r}")
    points = []
    for k, rp in enumerate(_need(record, "points", fname, list)):
        x = float(_need(rp, "x", fname, num))
        y = float(_need(rp, "y", fname, num))
        if not (0.0 <= x < width and 0.0 <= y < height):
            raise SchemaError(f"{fname}: point {k} at ({x}, {y}) outside the {width}x{height} image")
        t1 = float(_need(rp, "theta1", fname, num))
        t2 = float(_need(rp, "theta2", fname, num))
        if not (math.isfinite(t1) and math.isfinite(t2)):
            raise SchemaError(f"{fname}: point {k} has a non-finite angle")
        shape = _need(rp, "shape", fname, str)
        ptype = _need(rp, "type", fname, str)
        if shape not in SHAPES or ptype not in POINT_TYPES:
            raise SchemaError(f"{fname}: point {k} has bad shape/type {shape!r}/{ptype!r}")
        points.append(MarkingPoint(x, y, t1, t2, shape, ptype, 1.0))
    slots = []
    for k, rs in enumerate(_need(record, "slots", fname, list)):
        i1 = _need(rs, "p1", fname, int)
        i2 = _need(rs, "p2", fname, int)
        for i in (i1, i2):
            if not 0 <= i < len(points):
                raise DanglingSlotRef(f"{fname}: slot {k} cites missing point {i}")
        if i1 == i2:
            raise SchemaError(f"{fname}: slot {k} uses point {i1} twice")
        theta_s = float(_need(rs, "theta_s", fname, num))
        ptype = _need(rs, "type", fname, str)
        if ptype not in POINT_TYPES:
            raise SchemaError(f"{fname}: slot {k} has bad type {ptype!r}")
        slots.append(ParkingSlot(points[i1].xy, points[i2].xy, theta_s, ptype, 1.0))
    return scene, points, slots


def _load_one(sidecar: Path, grayscale: bool, grid_size: int, skip_invalid: bool):
    fname = sidecar.name
    try:
        record = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{fname}: invalid JSON ({exc})") from exc
    image_file = sidecar.parent / _need(record, "image", fname, str)
    flag = cv2.IMREAD_GRAYSCALE if grayscale else cv2.IMREAD_COLOR
    image = cv2.imread(str(image_file), flag)
    if image is None:
        raise SchemaError(f"{fname}: cannot read image {image_file.name}")
    h, w = image.shape[:2]
    try:
        scene, points, slots = parse_annotation(record, fname, w, h)
        encode_ground_truth(points, grid_size, w)
    except TwoPointsOneCell as exc:
        if not skip_invalid:
            raise TwoPointsOneCell(f"{fname}: {exc}") from exc
        log.warning("skipping %s: %s", fname, exc)
        return None
    return AnnotatedImage(image, points, slots, scene, True, sidecar.stem)


def load_annotations(path, grayscale: bool = True, grid_size: int = 16,
                     skip_invalid: bool = False, workers: int = 1) -> List[AnnotatedImage]:
    """Load every ``*.json`` sidecar in ``path`` (sorted by name) with its image.

    Records whose points share a grid cell raise :class:`TwoPointsOneCell`
    (or are skipped with a warning when ``skip_invalid``). ``workers > 1``
    reads files on a thread pool; the result order does not change.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"annotation directory {root} does not exist")
    sidecars = sorted(p for p in root.glob("*.json") if p.name != RESOLVED_CONFIG_NAME)

    def one(sc):
        return _load_one(sc, grayscale, grid_size, skip_invalid)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(one, sidecars))
    else:
        items = [one(sc) for sc in sidecars]
    return [it for it in items if it is not None]


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_images: int = 100
    image_size: int = 512
    slots_per_image: int = 3
    slot_width_range: Tuple[float, float] = (120.0, 150.0)
    depth_range: Tuple[float, float] = (150.0, 250.0)
    slanted_fraction: float = 0.12
    line_thickness: float = 6.0
    noise_std: float = 8.0
    brightness_range: Tuple[float, float] = (0.8, 1.2)
    occlusion_prob: float = 0.3
    orientation_jitter: float = 15.0
    scene_mix: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCENE_MIX))

    def __post_init__(self):
        self.slot_width_range = tuple(self.slot_width_range)
        self.depth_range = tuple(self.depth_range)
        self.brightness_range = tuple(self.brightness_range)
        if self.n_images < 0 or self.image_size < 64 or self.slots_per_image < 1:
            raise ConfigError("n_images >= 0, image_size >= 64 and slots_per_image >= 1 required")
        for name in ("slot_width_range", "depth_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        for name in ("slanted_fraction", "occlusion_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.line_thickness <= 0 or self.noise_std < 0 or self.orientation_jitter < 0:
            raise ConfigError("line_thickness > 0, noise_std >= 0, orientation_jitter >= 0 required")
        margin = 16
        if self.slots_per_image * self.slot_width_range[0] > self.image_size - 2 * margin:
            raise ConfigError("slot row cannot fit in the image at the minimum slot width")
        if "slanted" in self.scene_mix:
            raise ConfigError("the 'slanted' scene is controlled by slanted_fraction, not scene_mix")
        unknown = set(self.scene_mix) - set(SCENES)
        if unknown:
            raise ConfigError(f"unknown scene tags in scene_mix: {sorted(unknown)}")
        if not self.scene_mix or sum(self.scene_mix.values()) <= 0 or min(self.scene_mix.values()) < 0:
            raise ConfigError("scene_mix needs non-negative weights with a positive sum")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneLayout:
    """Geometry of one synthetic row of slots, before rendering."""

    scene: str
    points: List[MarkingPoint]
    slots: List[ParkingSlot]
    segments: List[Tuple[Tuple[float, float], Tuple[float, float]]]
    occluders: List[np.ndarray]


# (background, line) grey levels per scene
_APPEARANCE = {
    "indoor_low_light": (45.0, 120.0),
    "indoor_bright_light": (110.0, 235.0),
    "outdoor_daylight": (95.0, 225.0),
    "outdoor_rainy": (75.0, 160.0),
    "outdoor_shadow": (100.0, 225.0),
    "outdoor_night": (28.0, 95.0),
    "slanted": (95.0, 225.0),
    "damaged": (95.0, 200.0),
}


def _unit(deg):
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


def _deg(v):
    return direction_deg(0.0, 0.0, float(v[0]), float(v[1]))


def sample_layout(cfg: SynthConfig, rng: np.random.Generator) -> SceneLayout:
    size = cfg.image_size
    margin = 16.0
    slanted = bool(rng.random() < cfg.slanted_fraction)
    if slanted:
        scene = "slanted"
    else:
        tags = sorted(cfg.scene_mix)
        w = np.array([cfg.scene_mix[t] for t in tags], dtype=float)
        scene = tags[int(rng.choice(len(tags), p=w / w.sum()))]

    base = 90.0 * int(rng.integers(4))
    heading = base + rng.uniform(-cfg.orientation_jitter, cfg.orientation_jitter)
    u = _unit(heading)
    k = cfg.slots_per_image
    width = rng.uniform(*cfg.slot_width_range)
    extent = np.abs(u) * k * width
    lo = margin + extent / 2.0
    hi = size - margin - extent / 2.0
    if np.any(hi < lo):
        width = float((size - 2 * margin) / (k * np.abs(u).max()))
        extent = np.abs(u) * k * width
        lo = margin + extent / 2.0
        hi = np.maximum(size - margin - extent / 2.0, lo)
    center = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
    # slots open towards the image centre
    n = _unit(heading + 90.0)
    if np.dot(n, size / 2.0 - center) < 0:
        n = -n

    phi = rng.uniform(30.0, 60.0) * (1.0 if rng.random() < 0.5 else -1.0) if slanted else 0.0
    c, s_ = math.cos(math.radians(phi)), math.sin(math.radians(phi))
    v = np.array([c * n[0] - s_ * n[1], s_ * n[0] + c * n[1]])
    depth = rng.uniform(*cfg.depth_range)
    ptype = "slanted" if slanted else "perpendicular"

    positions = [center + (j - k / 2.0) * width * u for j in range(k + 1)]
    theta2 = _deg(v)
    # at a T junction both entrance directions exist; take the one with
    # cross(v, d) > 0 so the label is a function of the local picture
    t_side = u if (v[0] * u[1] - v[1] * u[0]) > 0 else -u
    points = []
    for j, p in enumerate(positions):
        if j == 0:
            shape, d = "L", u
        elif j == k:
            shape, d = "L", -u
        else:
            shape, d = "T", t_side
        points.append(MarkingPoint(float(p[0]), float(p[1]), _deg(d), theta2, shape, ptype, 1.0))

    slots = [ParkingSlot.from_points(points[j].xy, points[j + 1].xy, ptype, 1.0) for j in range(k)]
    segments = [(tuple(positions[0]), tuple(positions[-1]))]
    segments += [(tuple(p), tuple(p + depth * v)) for p in positions]

    occluders = []
    for j in range(k):
        if rng.random() < cfg.occlusion_prob:
            mid = (positions[j] + positions[j + 1]) / 2.0
            car_w = width * rng.uniform(0.45, 0.7)
            car_l = min(depth * 0.8, rng.uniform(110.0, 170.0))
            c = mid + v * (rng.uniform(30.0, 45.0) + car_l / 2.0)
            corners = np.array([c + a * u * car_w / 2.0 + b * v * car_l / 2.0
                                for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1))])
            occluders.append(corners)
    return SceneLayout(scene, points, slots, segments, occluders)


def _segment_coverage(canvas, a, b, thickness, gaps=None):
    """Max-composite an anti-aliased segment of given thickness into ``canvas``."""
    h, w = canvas.shape
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pad = thickness / 2.0 + 1.5
    x0 = max(int(math.floor(min(a[0], b[0]) - pad)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + pad)) + 1, w)
    y0 = max(int(math.floor(min(a[1], b[1]) - pad)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + pad)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs + 0.5 - a[0]
    py = ys + 0.5 - a[1]
    d = b - a
    length2 = float(d @ d)
    t = np.clip((px * d[0] + py * d[1]) / length2, 0.0, 1.0) if length2 > 0 else np.zeros_like(px)
    dist = np.hypot(px - t * d[0], py - t * d[1])
    cov = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    if gaps:
        s = t * math.sqrt(length2)
        for g0, g1 in gaps:
            cov[(s >= g0) & (s <= g1)] = 0.0
    np.maximum(canvas[y0:y1, x0:x1], cov, out=canvas[y0:y1, x0:x1])


def _damage_gaps(rng, a, b, points, keep_clear=24.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    d = (b - a) / max(length, 1e-9)
    protected = [float(np.dot(np.asarray(p) - a, d)) for p in points
                 if abs(d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])) < 1.0]
    gaps = []
    for _ in range(int(rng.integers(1, 4))):
        g0 = rng.uniform(0.0, length)
        g1 = g0 + rng.uniform(8.0, 30.0)
        if all(g1 < s - keep_clear or g0 > s + keep_clear for s in protected):
            gaps.append((g0, g1))
    return gaps


def render_layout(layout: SceneLayout, cfg: SynthConfig, rng: np.random.Generator | None = None,
                  clean: bool = False) -> np.ndarray:
    """Rasterise ``layout`` to a uint8 greyscale image.

    ``clean`` skips every nuisance (noise, brightness, shadows, rain, damage,
    occluders) and draws plain lines on a flat background.
    """
    size = cfg.image_size
    bg, fg = _APPEARANCE[layout.scene]
    coverage = np.zeros((size, size), dtype=np.float64)
    corner_xy = [p.xy for p in layout.points]
    for a, b in layout.segments:
        gaps = None
        if not clean and layout.scene == "damaged":
            gaps = _damage_gaps(rng, a, b, corner_xy)
        _segment_coverage(coverage, a, b, cfg.line_thickness, gaps)
    if clean:
        return np.clip(np.rint(bg + (fg - bg) * coverage), 0, 255).astype(np.uint8)

    low = cv2.resize(rng.normal(0.0, 1.0, (8, 8)), (size, size), interpolation=cv2.INTER_CUBIC)
    img = bg + 10.0 * low + (fg - bg) * coverage
    if layout.scene == "outdoor_rainy":
        streaks = np.zeros_like(coverage)
        for _ in range(120):
            p = rng.uniform(0, size, 2)
            q = p + _unit(rng.uniform(80.0, 100.0)) * rng.uniform(8.0, 20.0)
            _segment_coverage(streaks, p, q, 1.0)
        img += 35.0 * streaks
    for poly in layout.occluders:
        mask = np.zeros((size, size), dtype=np.uint8)
        cv2.fillConvexPoly(mask, np.round(poly * 16).astype(np.int32), 1, lineType=cv2.LINE_AA, shift=4)
        img = np.where(mask > 0, rng.uniform(20.0, 70.0) + 5.0 * low, img)
    if layout.scene == "outdoor_shadow":
        normal = _unit(rng.uniform(0.0, 360.0))
        ys, xs = np.mgrid[0:size, 0:size]
        side = (xs - size / 2.0) * normal[0] + (ys - size / 2.0) * normal[1] - rng.uniform(-120, 120)
        img *= np.where(side > 0, 0.5, 1.0)
    if layout.scene == "outdoor_night":
        ys, xs = np.mgrid[0:size, 0:size]
        r2 = ((xs - size / 2.0) ** 2 + (ys - size / 2.0) ** 2) / (0.6 * size) ** 2
        img *= 0.6 + 0.6 * np.exp(-r2)
    img *= rng.uniform(*cfg.brightness_range)
    noise = cfg.noise_std * (1.5 if layout.scene in ("outdoor_rainy", "outdoor_night") else 1.0)
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_image(cfg: SynthConfig, seed, index: int = 0, clean: bool = False) -> AnnotatedImage:
    """Per-image kernel: deterministic in ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    layout = sample_layout(cfg, rng)
    image = render_layout(layout, cfg, rng, clean=clean)
    return AnnotatedImage(image, layout.points, layout.slots, layout.scene, True, f"{index:06d}")


def generate_synthetic(config: SynthConfig, seed: int, clean: bool = False) -> List[AnnotatedImage]:
    if not isinstance(config, SynthConfig):
        raise ConfigError("generate_synthetic expects a SynthConfig")
    children = np.random.SeedSequence(seed).spawn(config.n_images)
    return [synth_image(config, child, i, clean) for i, child in enumerate(children)]
