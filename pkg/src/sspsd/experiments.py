"""Desk-scale comparison runs shared by ``sspsd ablate`` and the acceptance suite.

Every run trains on the same synthetic split and reports the final model's
AP on a separate synthetic test set. Finished runs leave a ``result.json``
next to their logs; a later call with an identical resolved config reuses it
instead of training again (training is deterministic, so the numbers would
not change).
"""
from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from .dataset import SynthConfig, generate_synthetic
from .model import ModelConfig
from .trainer import TrainConfig, train
from .types import AnnotatedImage

log = logging.getLogger(__name__)


def desk_model() -> ModelConfig:
    """Small detector that trains in minutes on one CPU core (input pooled to 128 px)."""
    return ModelConfig(input_size=128, encoder_channels=(16, 32, 64), convs_per_block=2,
                       latent_channels=64, decoder_channels=64)


def desk_train_config(**overrides) -> TrainConfig:
    # eps is absolute, and the desk latent has norm ~60 per image, so 0.1 barely moves the output
    base = dict(lr=1e-3, batch_size=24, labeled_ratio_n=10, ema_alpha_max=0.99, epochs=20, eps=10.0,
                eval_every=5, model=desk_model())
    base.update(overrides)
    return TrainConfig(**base)


# name -> TrainConfig overrides on top of the protocol's base config
VARIANTS: Dict[str, dict] = {
    "ss_psd": {},
    "supervised": {"beta_override": 0.0},
    "consistency_c": {"consistency": "c"},
    "consistency_cg": {"consistency": "cg"},
    "s_vat": {"vat_source": "student"},
    "t_vat": {"vat_source": "teacher"},
    "no_vat": {"vat_source": "none"},
}


@dataclass
class DeskProtocol:
    n_train: int = 2000
    n_test: int = 300
    data_seed: int = 1
    test_seed: int = 2
    seeds: Sequence[int] = (0, 1, 2)
    synth: SynthConfig = field(default_factory=SynthConfig)
    base: TrainConfig = field(default_factory=desk_train_config)

    def datasets(self):
        train_ds = generate_synthetic(replace(self.synth, n_images=self.n_train), self.data_seed)
        test_ds = generate_synthetic(replace(self.synth, n_images=self.n_test), self.test_seed)
        return train_ds, test_ds

    def config_for(self, variant: str, seed: int, extra: Optional[Mapping] = None) -> TrainConfig:
        d = self.base.to_dict()
        d.update(VARIANTS[variant] if variant in VARIANTS else {})
        d.update(extra or {})
        d["seed"] = seed
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_test": self.n_test, "data_seed": self.data_seed,
                "test_seed": self.test_seed, "seeds": list(self.seeds), "synth": self.synth.to_dict(),
                "base": self.base.to_dict()}


def _final_eval(metrics_path: Path) -> dict:
    last = None
    for line in metrics_path.read_text().splitlines():
        rec = json.loads(line)
        if rec["kind"] == "eval":
            last = rec
    if last is None:
        raise RuntimeError(f"{metrics_path} holds no evaluation record")
    return last


def run_one(config: TrainConfig, out_dir, train_ds: List[AnnotatedImage], test_ds: List[AnnotatedImage],
            protocol_key: Optional[dict] = None) -> dict:
    """Train once (or reuse a matching finished run) and return its result record."""
    out = Path(out_dir)
    # round-trip through JSON so tuples compare equal to the lists stored on disk
    key = json.loads(json.dumps({"config": config.to_dict(), "protocol": protocol_key}))
    result_path = out / "result.json"
    if result_path.exists():
        cached = json.loads(result_path.read_text())
        if cached.get("key") == key:
            return cached
    start = time.time()
    train(config, out_dir=out, dataset=list(train_ds), val_dataset=list(test_ds))
    final = _final_eval(out / "metrics.jsonl")
    result = {"key": key, "ap_slot": final["ap_slot"], "ap_point": final["ap_point"],
              "seconds": time.time() - start}
    result_path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def run_grid(protocol: DeskProtocol, variants: Iterable[str], root, extra: Optional[Dict[str, dict]] = None,
             data=None) -> Dict[str, dict]:
    """Run every variant for every seed; returns per-variant seed results and medians."""
    root = Path(root)
    train_ds, test_ds = data if data is not None else protocol.datasets()
    pkey = {k: v for k, v in protocol.to_dict().items() if k not in ("seeds", "base")}
    table = {}
    for name in variants:
        runs = []
        for seed in protocol.seeds:
            cfg = protocol.config_for(name, seed, (extra or {}).get(name))
            res = run_one(cfg, root / f"{name}_seed{seed}", train_ds, test_ds, pkey)
            log.info("%s seed %d: ap_slot %.4f ap_point %.4f (%.0fs)", name, seed, res["ap_slot"],
                     res["ap_point"], res["seconds"])
            runs.append(res)
        table[name] = {
            "ap_slot": [r["ap_slot"] for r in runs],
            "ap_point": [r["ap_point"] for r in runs],
            "median_ap_slot": statistics.median(r["ap_slot"] for r in runs),
            "median_ap_point": statistics.median(r["ap_point"] for r in runs),
        }
    return table


def format_table(table: Mapping[str, dict]) -> str:
    lines = ["| run | median AP slot | median AP point | AP slot per seed |",
             "|---|---|---|---|"]
    for name, row in table.items():
        seeds = ", ".join(f"{100 * v:.2f}" for v in row["ap_slot"])
        lines.append(f"| {name} | {100 * row['median_ap_slot']:.2f} | {100 * row['median_ap_point']:.2f} | {seeds} |")
    return "\n".join(lines)
