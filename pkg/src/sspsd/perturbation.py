"""Virtual adversarial noise on latent features.

``vat_noise`` runs the usual power iteration against one decoder.
``adaptive_vat`` builds one candidate per decoder (teacher and student, from
the same random start) and keeps one of them based on how strongly each
decoder reacts to its own noise.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .errors import DegenerateGradient

DecodeFn = Callable[[torch.Tensor], torch.Tensor]

VAT_MODES = ("robust_min", "aggressive_max")
DEGENERATE_NORM = 1e-12


def default_xi(latent: torch.Tensor) -> float:
    """Finite-difference step: 1e-6 per element, scaled to the per-sample norm."""
    return 1e-6 * math.sqrt(latent[0].numel())


def _per_sample_norm(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def _normalize(t: torch.Tensor) -> torch.Tensor:
    return t / _per_sample_norm(t).clamp_min(1e-30)


def grid_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """MSE between two batches of grids, averaged per sample and summed over the batch."""
    return ((a - b) ** 2).flatten(1).mean(dim=1).sum()


def random_direction(like: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    r = torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)
    return _normalize(r)


def _vat(latent, decode: DecodeFn, eps: float, xi: Optional[float], n_power_iter: int,
         r0: torch.Tensor):
    """Returns ``(noise, mean induced distance, degenerate)``."""
    z = latent.detach()
    xi = default_xi(z) if xi is None else xi
    with torch.no_grad():
        base = decode(z)
    r = r0.clone()
    degenerate = False
    for _ in range(n_power_iter):
        r.requires_grad_(True)
        # dividing by xi^2 leaves the direction alone but keeps the gradient
        # magnitude independent of xi, so the degeneracy test is meaningful
        dist = grid_distance(decode(z + xi * r), base) / (xi * xi)
        (grad,) = torch.autograd.grad(dist, r)
        grad = grad.detach()
        norms = _per_sample_norm(grad)
        dead = norms < DEGENERATE_NORM
        if bool(dead.any()):
            degenerate = True
            # fall back to the random start for the samples without a usable gradient
            grad = torch.where(dead, r0, grad / norms.clamp_min(1e-30))
        else:
            grad = grad / norms
        r = grad
    noise = eps * _normalize(r.detach())
    with torch.no_grad():
        induced = float(grid_distance(decode(z + noise), base)) / z.shape[0]
    return noise, induced, degenerate


def vat_noise(latent: torch.Tensor, decode: DecodeFn, eps: float, xi: Optional[float] = None,
              n_power_iter: int = 1, generator: Optional[torch.Generator] = None,
              r0: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Adversarial latent noise with per-sample L2 norm ``eps``.

    Warns with :class:`DegenerateGradient` and keeps the random start for
    samples whose gradient norm falls below 1e-12.
    """
    if eps <= 0 or (xi is not None and xi <= 0) or n_power_iter < 0:
        raise ValueError("eps and xi must be positive, n_power_iter non-negative")
    if r0 is None:
        r0 = random_direction(latent, generator)
    noise, _, degenerate = _vat(latent, decode, eps, xi, n_power_iter, r0)
    if degenerate:
        warnings.warn("VAT gradient vanished; using the random direction", DegenerateGradient)
    return noise


@dataclass
class NoiseResult:
    noise: torch.Tensor
    induced_distance_teacher: float
    induced_distance_student: float
    selected: str
    degenerate_teacher: bool = False
    degenerate_student: bool = False


def adaptive_vat(latent: torch.Tensor, teacher_decode: DecodeFn, student_decode: DecodeFn,
                 eps: float, mode: str = "robust_min", xi: Optional[float] = None,
                 n_power_iter: int = 1, generator: Optional[torch.Generator] = None) -> NoiseResult:
    """Pick between teacher- and student-derived noise for the whole batch.

    Each decoder is scored by the distance its own noise induces on its own
    output. ``robust_min`` keeps the lower score, ``aggressive_max`` the
    higher one; ties go to the teacher.
    """
    if mode not in VAT_MODES:
        raise ValueError(f"mode must be one of {VAT_MODES}, got {mode!r}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    r0 = random_direction(latent, generator)
    n_t, d_t, deg_t = _vat(latent, teacher_decode, eps, xi, n_power_iter, r0)
    n_s, d_s, deg_s = _vat(latent, student_decode, eps, xi, n_power_iter, r0)
    if deg_t and deg_s:
        warnings.warn("VAT gradient vanished for both decoders; using the random direction",
                      DegenerateGradient)
        return NoiseResult(n_t, d_t, d_s, "teacher", True, True)
    if mode == "robust_min":
        pick_student = d_s < d_t
    else:
        pick_student = d_s > d_t
    if pick_student:
        return NoiseResult(n_s, d_t, d_s, "student", deg_t, deg_s)
    return NoiseResult(n_t, d_t, d_s, "teacher", deg_t, deg_s)
