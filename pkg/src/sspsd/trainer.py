"""Teacher-student training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .dataset import SplitProtocol, load_annotations, split_semi
from .errors import ConfigError, NonFiniteLoss
from .evaluation import DEFAULT_B, I_512, evaluate
from .inference import detect
from .losses import CONSISTENCY_VARIANTS, consistency_loss, masked_cell_fraction, supervised_loss, unsup_weight
from .model import (
    Detector,
    ModelConfig,
    ema_alpha,
    ema_update_module,
    images_to_tensor,
    load_checkpoint,
    make_teacher,
    save_checkpoint,
)
from .perturbation import VAT_MODES, adaptive_vat, random_direction, vat_noise
from .postprocess import TemplateConfig
from .types import AnnotatedImage, encode_ground_truth

log = logging.getLogger(__name__)

VAT_SOURCES = ("adaptive", "student", "teacher", "none")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 24
    labeled_ratio_n: int = 12
    tau: float = 0.9
    eps: float = 0.1
    ema_alpha_max: float = 0.999
    epochs: int = 30
    seed: int = 0
    vat_mode: str = "robust_min"
    # which decoder the adversarial noise comes from; "adaptive" picks per batch
    vat_source: str = "adaptive"
    consistency: str = "cgm"
    perturb_labeled: bool = True
    # None -> N_unlabeled / N_labeled; 0 gives the supervised-only baseline
    beta_override: Optional[float] = None
    beta_warmup: bool = False
    xi: Optional[float] = None
    n_power_iter: int = 1
    deterministic: bool = True
    val_fraction: float = 0.1
    eval_every: int = 1
    eval_model: str = "teacher"
    I: float = round(I_512, 2)
    B: float = DEFAULT_B
    model: ModelConfig = field(default_factory=ModelConfig)
    template: TemplateConfig = field(default_factory=TemplateConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.template, dict):
            self.template = TemplateConfig(**self.template)
        if self.lr <= 0 or self.batch_size < 2 or self.labeled_ratio_n < 1 or self.epochs < 0:
            raise ConfigError("lr > 0, batch_size >= 2, labeled_ratio_n >= 1, epochs >= 0 required")
        if not 0.0 <= self.tau <= 1.0 or not 0.0 <= self.ema_alpha_max <= 1.0:
            raise ConfigError("tau and ema_alpha_max must lie in [0, 1]")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.vat_mode not in VAT_MODES:
            raise ConfigError(f"vat_mode must be one of {VAT_MODES}")
        if self.vat_source not in VAT_SOURCES:
            raise ConfigError(f"vat_source must be one of {VAT_SOURCES}")
        if self.consistency not in CONSISTENCY_VARIANTS:
            raise ConfigError(f"consistency must be one of {CONSISTENCY_VARIANTS}")
        if self.eval_model not in ("teacher", "student"):
            raise ConfigError("eval_model must be 'teacher' or 'student'")
        if self.beta_override is not None and self.beta_override < 0:
            raise ConfigError("beta_override must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["template"] = self.template.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    epoch: int
    sup_loss: float
    unsup_loss: float
    total_loss: float
    beta: float
    selected_decoder: str
    masked_cell_fraction: float
    d_teacher: Optional[float] = None
    d_student: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps({"kind": "step", **asdict(self)}, sort_keys=True)


@dataclass
class TrainState:
    student: Detector
    teacher: Detector
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    beta: float
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)


def init_state(config: TrainConfig, beta: float) -> TrainState:
    torch.manual_seed(config.seed)
    student = Detector(config.model)
    teacher = make_teacher(student)
    opt = torch.optim.Adam(student.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(student, teacher, opt, gen, beta, 0, 0, config.to_dict())


def _perturb(state: TrainState, z: torch.Tensor, config: TrainConfig):
    """Noise for latent batch ``z`` and a record of how it was chosen."""
    if config.vat_source == "none":
        return torch.zeros_like(z), "none", None, None
    if config.vat_source == "adaptive":
        res = adaptive_vat(z, state.teacher.decode, state.student.decode, config.eps, config.vat_mode,
                           config.xi, config.n_power_iter, state.generator)
        return res.noise, res.selected, res.induced_distance_teacher, res.induced_distance_student
    decoder = state.teacher.decode if config.vat_source == "teacher" else state.student.decode
    r0 = random_direction(z, state.generator)
    return vat_noise(z, decoder, config.eps, config.xi, config.n_power_iter, r0=r0), config.vat_source, None, None


def train_step(state: TrainState, labeled_batch, unlabeled_batch, config: TrainConfig,
               beta: Optional[float] = None):
    """One optimisation step; mutates and returns ``state`` plus the step's metrics.

    ``labeled_batch`` is ``(images, target_grids)`` as tensors,
    ``unlabeled_batch`` an image tensor (possibly empty or None).
    """
    beta = state.beta if beta is None else beta
    x_l, y_l = labeled_batch
    n_l = x_l.shape[0]
    use_unlabeled = unlabeled_batch is not None and unlabeled_batch.shape[0] > 0 and beta > 0
    student, teacher = state.student, state.teacher
    student.train()

    x = torch.cat([x_l, unlabeled_batch]) if use_unlabeled else x_l
    z = student.encode(x)
    noise, selected, d_t, d_s = _perturb(state, z, config)
    if not config.perturb_labeled:
        noise = noise.clone()
        noise[:n_l] = 0.0
    pred = student.decode(z + noise)

    sup = supervised_loss(pred[:n_l], y_l)
    if use_unlabeled:
        with torch.no_grad():
            teacher_pred = teacher(unlabeled_batch)
        unsup = consistency_loss(pred[n_l:], teacher_pred, config.tau, config.consistency)
        masked = masked_cell_fraction(teacher_pred, config.tau)
    else:
        unsup = torch.zeros((), dtype=sup.dtype)
        masked = 0.0
    total = sup + beta * unsup
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}", batch_index=state.step,
                            dump={"sup": float(sup.detach()), "unsup": float(unsup.detach()), "beta": beta})
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update_module(teacher, student, ema_alpha(state.step, config.ema_alpha_max))

    sup_f, unsup_f = float(sup.detach()), float(unsup.detach())
    metrics = StepMetrics(state.step, state.epoch, sup_f, unsup_f, sup_f + beta * unsup_f, beta,
                          selected, masked, d_t, d_s)
    state.step += 1
    return state, metrics


# --------------------------------------------------------------------------
# full training run
# --------------------------------------------------------------------------

def _epoch_plan(seed: int, epoch: int, n_lab: int, n_unl: int, half: int):
    """Index batches for one epoch; depends only on (seed, epoch) so resumes line up."""
    if n_unl > 0:
        steps = math.ceil(n_unl / half)
        unl = np.random.default_rng([seed, epoch, 1]).permutation(n_unl)
        unl_batches = [unl[i * half:(i + 1) * half] for i in range(steps)]
        lab_per_step = half
    else:
        lab_per_step = 2 * half
        steps = math.ceil(n_lab / lab_per_step)
        unl_batches = [np.zeros(0, dtype=int)] * steps
    rng = np.random.default_rng([seed, epoch, 0])
    stream = []
    while len(stream) < steps * lab_per_step:
        stream.extend(rng.permutation(n_lab).tolist())
    lab_batches = [np.array(stream[i * lab_per_step:(i + 1) * lab_per_step]) for i in range(steps)]
    return list(zip(lab_batches, unl_batches))


def _evaluate_snapshot(model: Detector, items: Sequence[AnnotatedImage], config: TrainConfig) -> dict:
    snapshot = copy.deepcopy(model)
    dets = detect(snapshot, [it.image for it in items], config.template)
    return evaluate(items, dets, config.I, config.B)


def _configure_determinism(config: TrainConfig):
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def train(config: TrainConfig, dataset_dir=None, out_dir=".", val_dir=None, resume: bool = False,
          dataset: Optional[List[AnnotatedImage]] = None, val_dataset: Optional[List[AnnotatedImage]] = None,
          log_every: int = 0) -> Path:
    """Run a full training job and return the path of the best checkpoint.

    Writes ``config.json``, ``metrics.jsonl``, ``last.pt`` and ``best.pt``
    to ``out_dir``. Pass ``dataset``/``val_dataset`` to skip disk loading.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _configure_determinism(config)
    if dataset is None:
        dataset = load_annotations(dataset_dir, grid_size=config.model.grid_size)
    if val_dataset is None and val_dir is not None:
        val_dataset = load_annotations(val_dir, grid_size=config.model.grid_size)
    if val_dataset is None:
        n_val = int(round(len(dataset) * config.val_fraction))
        perm = np.random.default_rng([config.seed, 99]).permutation(len(dataset))
        val_idx = set(perm[:n_val].tolist())
        val_dataset = [d for i, d in enumerate(dataset) if i in val_idx]
        dataset = [d for i, d in enumerate(dataset) if i not in val_idx]

    labeled, unlabeled = split_semi(dataset, SplitProtocol(config.labeled_ratio_n, config.seed))
    for item in unlabeled:
        item.strict = True
    beta_data = unsup_weight(len(unlabeled), len(labeled))
    beta = beta_data if config.beta_override is None else float(config.beta_override)
    size = config.model.grid_size
    targets = torch.from_numpy(np.stack([
        encode_ground_truth(it.points, size, config.model.image_size) for it in labeled
    ])).to(torch.float32)
    lab_images = [it.image for it in labeled]
    unl_images = [it.image for it in unlabeled]

    state = init_state(config, beta)
    metrics_path = out / "metrics.jsonl"
    best_path = out / "best.pt"
    last_path = out / "last.pt"
    best_ap = -1.0
    start_epoch = 0
    if resume and last_path.exists():
        ck = load_checkpoint(last_path)
        state.student.load_state_dict(ck["student"].state_dict())
        state.teacher.load_state_dict(ck["teacher"].state_dict())
        state.optimizer.load_state_dict(ck["optimizer"])
        state.generator.set_state(ck["generator"])
        state.step = ck["step"]
        start_epoch = ck["epoch"] + 1
        best_ap = ck["best_ap"]
        with open(metrics_path, "r+b") as fh:
            fh.truncate(ck["log_bytes"])
    else:
        metrics_path.write_text("")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    half = config.batch_size // 2
    steps_per_epoch = None
    with open(metrics_path, "a") as logf:
        for epoch in range(start_epoch, config.epochs):
            state.epoch = epoch
            plan = _epoch_plan(config.seed, epoch, len(labeled), len(unlabeled), half)
            steps_per_epoch = steps_per_epoch or len(plan)
            for lab_idx, unl_idx in plan:
                x_l = images_to_tensor([lab_images[i] for i in lab_idx])
                y_l = targets[torch.from_numpy(lab_idx)]
                x_u = images_to_tensor([unl_images[i] for i in unl_idx]) if len(unl_idx) else None
                step_beta = beta
                if config.beta_warmup:
                    step_beta = beta * min(1.0, state.step / steps_per_epoch)
                _, m = train_step(state, (x_l, y_l), x_u, config, step_beta)
                logf.write(m.to_json() + "\n")
                if log_every and m.step % log_every == 0:
                    log.info("step %d sup %.4f unsup %.4f sel %s", m.step, m.sup_loss, m.unsup_loss,
                             m.selected_decoder)
            last_epoch = epoch == config.epochs - 1
            if val_dataset and ((epoch + 1) % config.eval_every == 0 or last_epoch):
                model = state.teacher if config.eval_model == "teacher" else state.student
                report = _evaluate_snapshot(model, val_dataset, config)
                rec = {"kind": "eval", "epoch": epoch, "step": state.step,
                       "ap_point": report["ap_point"], "ap_slot": report["ap_slot"]}
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                log.info("epoch %d val ap_point %.4f ap_slot %.4f", epoch, report["ap_point"], report["ap_slot"])
                if report["ap_slot"] > best_ap:
                    best_ap = report["ap_slot"]
                    save_checkpoint(best_path, state.student, state.teacher, state.step, config.to_dict(),
                                    {"epoch": epoch, "best_ap": best_ap})
            logf.flush()
            save_checkpoint(last_path, state.student, state.teacher, state.step, config.to_dict(), {
                "epoch": epoch,
                "best_ap": best_ap,
                "optimizer": state.optimizer.state_dict(),
                "generator": state.generator.get_state(),
                "log_bytes": metrics_path.stat().st_size,
            })
    if not best_path.exists():
        save_checkpoint(best_path, state.student, state.teacher, state.step, config.to_dict(),
                        {"epoch": state.epoch, "best_ap": best_ap})
    reads = sum(it.label_reads for it in unlabeled)
    if reads:
        raise RuntimeError(f"unlabeled ground truth was read {reads} times")
    return best_path
