"""Marking-point and parking-slot AP with PASCAL VOC all-point interpolation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ZeroGT
from .types import SCENES, AnnotatedImage, MarkingPoint, ParkingSlot

# 10 px tolerance at 600 px rescaled to 512 px images
I_512 = 10.0 * 512.0 / 600.0
DEFAULT_B = 10.0


@dataclass(frozen=True)
class MatchConfig:
    I: float = round(I_512, 2)
    B: float = DEFAULT_B
    target: str = "slots"

    def __post_init__(self):
        if self.I <= 0 or not 0 < self.B < 180:
            raise ConfigError(f"need I > 0 and 0 < B < 180, got I={self.I}, B={self.B}")
        if self.target not in ("points", "slots"):
            raise ConfigError(f"target must be 'points' or 'slots', got {self.target!r}")


def _angle_ok(a: float, b: float, B: float) -> bool:
    d = abs(a - b)
    return d < B or 360.0 - d < B


def point_matches(g: MarkingPoint, d: MarkingPoint, cfg: MatchConfig) -> bool:
    return ((g.x - d.x) ** 2 + (g.y - d.y) ** 2 < cfg.I ** 2
            and _angle_ok(g.theta1, d.theta1, cfg.B)
            and _angle_ok(g.theta2, d.theta2, cfg.B)
            and g.shape == d.shape and g.ptype == d.ptype)


def _slot_endpoint_cost(g: ParkingSlot, d: ParkingSlot, I: float) -> Optional[float]:
    """Squared endpoint error under the better assignment, or None if outside ``I``."""
    def sq(p, q):
        return (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2

    best = None
    for a, b in ((d.p1, d.p2), (d.p2, d.p1)):
        e1, e2 = sq(g.p1, a), sq(g.p2, b)
        if e1 < I * I and e2 < I * I:
            cost = e1 + e2
            best = cost if best is None else min(best, cost)
    return best


def slot_matches(g: ParkingSlot, d: ParkingSlot, cfg: MatchConfig) -> bool:
    return _slot_endpoint_cost(g, d, cfg.I) is not None and _angle_ok(g.theta_s, d.theta_s, cfg.B)


def _greedy(gt, det, valid, cost) -> np.ndarray:
    order = sorted(range(len(det)), key=lambda i: -det[i].confidence)
    taken = [False] * len(gt)
    flags = np.zeros(len(det), dtype=bool)
    for i in order:
        best, best_cost = None, None
        for j, g in enumerate(gt):
            if taken[j] or not valid(g, det[i]):
                continue
            c = cost(g, det[i])
            if best is None or c < best_cost:
                best, best_cost = j, c
        if best is not None:
            taken[best] = True
            flags[i] = True
    return flags


def match_points(gt: Sequence[MarkingPoint], det: Sequence[MarkingPoint], cfg: MatchConfig) -> np.ndarray:
    """TP flag per detection (in input order); greedy by confidence, nearest GT wins."""
    return _greedy(gt, det, lambda g, d: point_matches(g, d, cfg),
                   lambda g, d: (g.x - d.x) ** 2 + (g.y - d.y) ** 2)


def match_slots(gt: Sequence[ParkingSlot], det: Sequence[ParkingSlot], cfg: MatchConfig) -> np.ndarray:
    return _greedy(gt, det, lambda g, d: slot_matches(g, d, cfg),
                   lambda g, d: _slot_endpoint_cost(g, d, cfg.I))


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    n_gt: int


def pr_curve(flags: Sequence[bool], n_gt: int, confidences: Optional[Sequence[float]] = None) -> PRCurve:
    """Cumulative precision/recall per rank.

    ``flags`` must already be in descending-confidence order unless
    ``confidences`` is given, in which case they are sorted here (stable).
    """
    flags = np.asarray(flags, dtype=bool)
    if confidences is not None:
        order = np.argsort(-np.asarray(confidences, dtype=float), kind="stable")
        flags = flags[order]
    if n_gt == 0:
        if len(flags):
            raise ZeroGT("detections present but there is no ground truth")
        return PRCurve(np.zeros(0), np.zeros(0), 0)
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return PRCurve(tp / n_gt, tp / ranks, n_gt)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated AP (PASCAL VOC 2010)."""
    if len(curve.recalls) == 0:
        return 0.0
    mrec = np.concatenate(([0.0], curve.recalls, [1.0]))
    mpre = np.concatenate(([0.0], curve.precisions, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _pooled_ap(records: List[Tuple[float, bool]], n_gt: int) -> Optional[float]:
    if n_gt == 0:
        return 0.0 if records else None
    conf = [c for c, _ in records]
    flags = [f for _, f in records]
    return average_precision(pr_curve(flags, n_gt, conf))


def evaluate(dataset: Sequence[AnnotatedImage], detections: Sequence[Tuple[list, list]],
             I: float = round(I_512, 2), B: float = DEFAULT_B) -> dict:
    """Pool matches over the whole split and report point/slot AP overall and per scene.

    ``detections[k]`` is ``(points, slots)`` for ``dataset[k]``. Scene APs are
    ``None`` when a scene has neither ground truth nor detections.
    """
    if len(detections) != len(dataset):
        raise ValueError(f"{len(dataset)} images but {len(detections)} detection entries")
    pcfg = MatchConfig(I, B, "points")
    scfg = MatchConfig(I, B, "slots")
    pts_rec, slot_rec = [], []
    n_gt_pts = n_gt_slots = 0
    per_scene: Dict[str, dict] = {s: {"records": [], "n_gt": 0, "n_images": 0} for s in SCENES}
    for item, (det_pts, det_slots) in zip(dataset, detections):
        gt_pts, gt_slots = item.points, item.slots
        pf = match_points(gt_pts, det_pts, pcfg)
        sf = match_slots(gt_slots, det_slots, scfg)
        pts_rec += [(d.confidence, bool(f)) for d, f in zip(det_pts, pf)]
        srec = [(d.confidence, bool(f)) for d, f in zip(det_slots, sf)]
        slot_rec += srec
        n_gt_pts += len(gt_pts)
        n_gt_slots += len(gt_slots)
        bucket = per_scene[item.scene]
        bucket["records"] += srec
        bucket["n_gt"] += len(gt_slots)
        bucket["n_images"] += 1
    return {
        "ap_point": _pooled_ap(pts_rec, n_gt_pts) or 0.0,
        "ap_slot": _pooled_ap(slot_rec, n_gt_slots) or 0.0,
        "per_scene": {
            s: {"ap_slot": _pooled_ap(b["records"], b["n_gt"]), "n_images": b["n_images"]}
            for s, b in per_scene.items()
        },
        "config": {"I": I, "B": B, "n_images": len(dataset),
                   "n_gt_points": n_gt_pts, "n_gt_slots": n_gt_slots},
    }
