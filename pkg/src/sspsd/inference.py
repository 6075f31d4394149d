"""Batch inference: images -> grids -> (points, slots)."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np
import torch

from .model import Detector, images_to_tensor
from .postprocess import TemplateConfig, detect_slots


@torch.no_grad()
def predict_grids(model: Detector, images: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Run the detector; returns ``(N, S, S, 9)`` float64 grids."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            x = images_to_tensor(images[i:i + batch_size], next(model.parameters()).dtype)
            out.append(model(x).double().numpy())
    finally:
        model.train(was_training)
    s = model.cfg.grid_size
    return np.concatenate(out) if out else np.zeros((0, s, s, 9))


def detect(model: Detector, images: Sequence[np.ndarray], cfg: TemplateConfig | None = None,
           batch_size: int = 32) -> List[tuple]:
    """``[(points, slots), ...]`` for every image."""
    grids = predict_grids(model, images, batch_size)
    size = model.cfg.image_size
    return [detect_slots(g, cfg, size) for g in grids]
