"""Encoder-decoder marking-point detector and teacher EMA maintenance."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, SchemaError, ShapeError, ShapeMismatch
from .types import NUM_CHANNELS

CHECKPOINT_MAGIC = "SSPSD1"

# output channels squashed to [0, 1]; the rest (angle pairs) go through tanh
SIGMOID_CHANNELS = (0, 1, 2, 7, 8)
TANH_CHANNELS = (3, 4, 5, 6)


@dataclass
class ModelConfig:
    image_size: int = 512
    # images are average-pooled to input_size before the first convolution
    input_size: int = 512
    in_channels: int = 1
    grid_size: int = 16
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 64, 64)
    # extra stride-1 convolutions after each downsampling convolution
    convs_per_block: int = 1
    latent_channels: int = 64
    decoder_channels: int = 64
    decoder_blocks: int = 2
    normalize_input: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.image_size % self.input_size:
            raise ConfigError("image_size must be a multiple of input_size")
        ratio = self.input_size / self.grid_size
        k = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if k < 0 or 2 ** k != ratio:
            raise ConfigError("input_size / grid_size must be a power of two")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if len(self.encoder_channels) != k:
            raise ConfigError(f"need {k} encoder blocks to go from {self.input_size} to {self.grid_size}, "
                              f"got {len(self.encoder_channels)}")

    @property
    def pool(self) -> int:
        return self.image_size // self.input_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def output_activation(raw: torch.Tensor) -> torch.Tensor:
    """Apply per-channel activations to a channel-last ``(..., 9)`` tensor."""
    sig = torch.sigmoid(raw)
    tan = torch.tanh(raw)
    mask = torch.zeros(NUM_CHANNELS, dtype=torch.bool, device=raw.device)
    mask[list(TANH_CHANNELS)] = True
    return torch.where(mask, tan, sig)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.encoder_channels):
            c_out = cfg.latent_channels if i == len(cfg.encoder_channels) - 1 else c
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            for _ in range(cfg.convs_per_block - 1):
                layers += [nn.Conv2d(c_out, c_out, 3, padding=1), nn.LeakyReLU(0.1)]
            c_in = c_out
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if self.cfg.pool > 1:
            x = F.avg_pool2d(x, self.cfg.pool)
        if self.cfg.normalize_input:
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            std = x.std(dim=(1, 2, 3), keepdim=True)
            x = (x - mean) / (std + 1e-3)
        return self.body(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        c_in = cfg.latent_channels
        for _ in range(cfg.decoder_blocks):
            layers += [nn.Conv2d(c_in, cfg.decoder_channels, 3, padding=1), nn.LeakyReLU(0.1)]
            c_in = cfg.decoder_channels
        layers.append(nn.Conv2d(c_in, NUM_CHANNELS, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        raw = self.body(z).permute(0, 2, 3, 1)
        return output_activation(raw)


class Detector(nn.Module):
    """``M = {E, D}``: image ``(B, C, H, W)`` -> grid ``(B, S, S, 9)``."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1] != cfg.in_channels or \
                images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise ShapeError(f"expected images of shape (B, {cfg.in_channels}, {cfg.image_size}, "
                             f"{cfg.image_size}), got {tuple(images.shape)}")
        return self.encoder(images)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if latent.dim() != 4 or latent.shape[1:] != (cfg.latent_channels, cfg.grid_size, cfg.grid_size):
            raise ShapeError(f"expected latent of shape (B, {cfg.latent_channels}, {cfg.grid_size}, "
                             f"{cfg.grid_size}), got {tuple(latent.shape)}")
        return self.decoder(latent)

    def forward(self, images):
        return self.decode(self.encode(images))


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack uint8 ``(H, W)`` or ``(H, W, C)`` arrays into a ``(B, C, H, W)`` tensor in [0, 1]."""
    import numpy as np

    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[:, None]
    else:
        arr = arr.transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype) / 255.0


# --------------------------------------------------------------------------
# EMA
# --------------------------------------------------------------------------

def ema_alpha(step: int, alpha_max: float = 0.999) -> float:
    """Mean-teacher warm-up: ``min(1 - 1 / (step + 1), alpha_max)``."""
    return min(1.0 - 1.0 / (step + 1), alpha_max)


def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor],
               alpha: float) -> "OrderedDict[str, torch.Tensor]":
    """Return ``alpha * teacher + (1 - alpha) * student`` per named array."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if list(teacher.keys()) != list(student.keys()):
        raise ShapeMismatch("teacher and student parameter names differ")
    out = OrderedDict()
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeMismatch(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        out[name] = alpha * t + (1.0 - alpha) * s
    return out


@torch.no_grad()
def ema_update_module(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """In-place variant of :func:`ema_update` on two modules."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeMismatch("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeMismatch(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        t.mul_(alpha).add_(s, alpha=1.0 - alpha)


def make_teacher(student: Detector) -> Detector:
    teacher = Detector(student.cfg)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher.eval()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, student: Detector, teacher: Detector, step: int, config: dict,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "student": student.state_dict(),
        "teacher": teacher.state_dict(),
        "model_config": json.dumps(student.cfg.to_dict(), sort_keys=True),
        "config": json.dumps(config, sort_keys=True),
        "step": int(step),
    }
    if extra:
        payload.update(extra)
    # write-then-rename so a crash never leaves a truncated checkpoint behind
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    """Load a checkpoint; returns the payload with ``student``/``teacher`` as Detectors."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path}: not an {CHECKPOINT_MAGIC} checkpoint")
    cfg = ModelConfig.from_dict(json.loads(payload["model_config"]))
    student = Detector(cfg)
    student.load_state_dict(payload["student"])
    teacher = Detector(cfg)
    teacher.load_state_dict(payload["teacher"])
    for p in teacher.parameters():
        p.requires_grad_(False)
    payload["student_state"] = payload["student"]
    payload["student"] = student
    payload["teacher"] = teacher.eval()
    payload["config"] = json.loads(payload["config"])
    payload["model_config"] = cfg
    return payload
