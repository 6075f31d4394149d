"""Supervised grid loss, confidence-guided consistency loss and the weighted total.

All grid losses take channel-last tensors ``(B, S, S, 9)`` (or a single
``(S, S, 9)`` grid), sum over cells and average over the batch. Squared L2 is
used for every norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatch, ZeroLabeled

CONSISTENCY_VARIANTS = ("c", "cg", "cgm")


def _as_batch(grid) -> torch.Tensor:
    t = torch.as_tensor(grid)
    if not torch.is_floating_point(t):
        t = t.to(torch.float64)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ShapeMismatch(f"expected (B, S, S, N) or (S, S, N) grid, got {tuple(t.shape)}")
    return t


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"grid shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def supervised_loss(pred, target) -> torch.Tensor:
    pred = _as_batch(pred)
    target = _as_batch(target).to(pred.dtype)
    _check_pair(pred, target)
    conf = pred[..., 0]
    occupied = target[..., 0] > 0.5
    q_err = ((pred[..., 1:] - target[..., 1:]) ** 2).sum(dim=-1)
    per_cell = torch.where(occupied, (conf - 1.0) ** 2 + q_err, conf ** 2)
    return per_cell.sum(dim=(1, 2)).mean()


def consistency_loss(student, teacher, tau: float = 0.9, variant: str = "cgm") -> torch.Tensor:
    """Teacher-student grid consistency.

    ``variant`` picks the ablation level: ``"c"`` weighs every cell equally,
    ``"cg"`` scales the geometry term by the teacher confidence, ``"cgm"``
    additionally drops the geometry term where the teacher confidence is
    below ``tau``.
    """
    if variant not in CONSISTENCY_VARIANTS:
        raise ValueError(f"variant must be one of {CONSISTENCY_VARIANTS}, got {variant!r}")
    student = _as_batch(student)
    teacher = _as_batch(teacher).to(student.dtype).detach()
    _check_pair(student, teacher)
    c_t = teacher[..., 0]
    conf_term = (student[..., 0] - c_t) ** 2
    q_term = ((student[..., 1:] - teacher[..., 1:]) ** 2).sum(dim=-1)
    if variant == "c":
        per_cell = conf_term + q_term
    elif variant == "cg":
        per_cell = conf_term + q_term * c_t
    else:
        per_cell = conf_term + torch.where(c_t >= tau, q_term * c_t, torch.zeros_like(q_term))
    return per_cell.sum(dim=(1, 2)).mean()


def cgm_consistency_loss(student, teacher, tau: float = 0.9) -> torch.Tensor:
    return consistency_loss(student, teacher, tau, "cgm")


def masked_cell_fraction(teacher, tau: float) -> float:
    c_t = _as_batch(teacher)[..., 0]
    if c_t.numel() == 0:
        return 0.0
    return float((c_t < tau).to(torch.float64).mean())


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    unsup: float
    beta: float
    total: float
    masked_cell_fraction: float = 0.0


def unsup_weight(n_unlabeled: int, n_labeled: int) -> float:
    if n_labeled < 1:
        raise ZeroLabeled("the unsupervised weight needs at least one labeled sample")
    return n_unlabeled / n_labeled


def total_loss(sup: float, unsup: float, n_unlabeled: int, n_labeled: int,
               masked_fraction: float = 0.0) -> LossBreakdown:
    beta = unsup_weight(n_unlabeled, n_labeled)
    sup, unsup = float(sup), float(unsup)
    return LossBreakdown(sup, unsup, beta, sup + beta * unsup, float(masked_fraction))
