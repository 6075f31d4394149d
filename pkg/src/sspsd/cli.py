"""``sspsd`` command line: train, eval, infer, synth, stats, ablate.

Exit status is 1 for configuration or I/O problems and 2 when training hits a
non-finite loss. Each subcommand writes ``resolved_config.json`` into its
output directory so the run can be repeated from that file alone.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np

from .dataset import (
    RESOLVED_CONFIG_NAME,
    SynthConfig,
    dataset_stats,
    generate_synthetic,
    load_annotations,
    save_annotations,
)
from .errors import NonFiniteLoss, SSPSDError
from .evaluation import DEFAULT_B, I_512, evaluate
from .inference import detect
from .model import load_checkpoint
from .postprocess import TemplateConfig
from .trainer import TrainConfig, train
from .types import MarkingPoint, ParkingSlot

log = logging.getLogger("sspsd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit with status 2, which is reserved for NonFiniteLoss
    def error(self, message):
        raise UsageError(message)


def _num_workers() -> int:
    raw = os.environ.get("SSPSD_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SSPSD_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SSPSD_NUM_WORKERS must be >= 1")
    return n


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _snapshot(out: Path, command: str, args: argparse.Namespace, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {"command": command, "flags": flags, "resolved": resolved}
    (out / RESOLVED_CONFIG_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


# -- detections as JSON ---------------------------------------------------

def detections_to_json(name: str, points: List[MarkingPoint], slots: List[ParkingSlot]) -> dict:
    return {
        "image": name,
        "points": [{"x": p.x, "y": p.y, "theta1": p.theta1, "theta2": p.theta2, "shape": p.shape,
                    "type": p.ptype, "confidence": p.confidence} for p in points],
        "slots": [{"p1": list(s.p1), "p2": list(s.p2), "theta_s": s.theta_s, "type": s.ptype,
                   "confidence": s.confidence} for s in slots],
    }


def detections_from_json(record: dict):
    points = [MarkingPoint(p["x"], p["y"], p["theta1"], p["theta2"], p["shape"], p["type"], p["confidence"])
              for p in record["points"]]
    slots = [ParkingSlot(tuple(s["p1"]), tuple(s["p2"]), s["theta_s"], s["type"], s["confidence"])
             for s in record["slots"]]
    return points, slots


def draw_overlay(image: np.ndarray, points, slots) -> np.ndarray:
    """Points as arrows along theta1, slots as entrance lines."""
    canvas = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR) if image.ndim == 2 else image.copy()
    for s in slots:
        a = tuple(int(round(v)) for v in s.p1)
        b = tuple(int(round(v)) for v in s.p2)
        cv2.line(canvas, a, b, (0, 200, 0), 2, cv2.LINE_AA)
    for p in points:
        tip = (int(round(p.x + 24 * math.cos(math.radians(p.theta1)))),
               int(round(p.y + 24 * math.sin(math.radians(p.theta1)))))
        cv2.arrowedLine(canvas, (int(round(p.x)), int(round(p.y))), tip, (0, 0, 255), 2, cv2.LINE_AA,
                        tipLength=0.3)
    return canvas


# -- subcommands ------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    d = _read_json(args.config)
    flags = {"labeled_ratio_n": args.ratio_n, "tau": args.tau, "eps": args.eps, "vat_mode": args.vat_mode,
             "seed": args.seed, "epochs": args.epochs, "lr": args.lr}
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.deterministic:
        d["deterministic"] = True
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    _snapshot(out, "train", args, cfg.to_dict())
    workers = _num_workers()
    data = load_annotations(args.data, grid_size=cfg.model.grid_size, workers=workers)
    val = load_annotations(args.val_data, grid_size=cfg.model.grid_size, workers=workers) if args.val_data else None
    best = train(cfg, out_dir=out, dataset=data, val_dataset=val, resume=args.resume, log_every=args.log_every)
    print(best)
    return 0


def _load_detections(folder: Path, dataset) -> list:
    dets = []
    for item in dataset:
        path = folder / f"{item.name}.json"
        if not path.exists():
            raise UsageError(f"no detections for {item.name} in {folder}")
        dets.append(detections_from_json(_read_json(path)))
    return dets


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.detections is None):
        raise UsageError("eval needs exactly one of --checkpoint or --detections")
    dataset = load_annotations(args.data, workers=_num_workers())
    template = TemplateConfig(**_read_json(args.template))
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[args.model]
        dets = detect(model, [it.image for it in dataset], template)
    else:
        dets = _load_detections(Path(args.detections), dataset)
    report = evaluate(dataset, dets, args.I, args.B)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _snapshot(out, "eval", args, {"template": template.to_dict(), "I": args.I, "B": args.B})
        (out / "report.json").write_text(text)
    print(text)
    return 0


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck[args.model]
    template = TemplateConfig(**_read_json(args.template))
    out = Path(args.out)
    _snapshot(out, "infer", args, {"template": template.to_dict(), "model": model.cfg.to_dict()})
    files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise UsageError(f"no images found in {args.images}")
    gray = model.cfg.in_channels == 1
    images = []
    for f in files:
        im = cv2.imread(str(f), cv2.IMREAD_GRAYSCALE if gray else cv2.IMREAD_COLOR)
        if im is None:
            raise UsageError(f"cannot read {f}")
        images.append(im)
    for f, im, (points, slots) in zip(files, images, detect(model, images, template)):
        (out / f"{f.stem}.json").write_text(json.dumps(detections_to_json(f.stem, points, slots), indent=1))
        if not args.no_overlay:
            cv2.imwrite(str(out / f"{f.stem}_overlay.png"), draw_overlay(im, points, slots))
    print(f"wrote {len(files)} detection files to {out}")
    return 0


def cmd_synth(args) -> int:
    d = _read_json(args.config)
    if args.n_images is not None:
        d["n_images"] = args.n_images
    cfg = SynthConfig(**d)
    out = Path(args.out)
    _snapshot(out, "synth", args, cfg.to_dict())
    items = generate_synthetic(cfg, args.seed, clean=args.clean)
    save_annotations(items, out)
    print(f"wrote {len(items)} images to {out}")
    return 0


def cmd_stats(args) -> int:
    stats = dataset_stats(load_annotations(args.data, workers=_num_workers()))
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _snapshot(out, "stats", args, {})
        (out / "stats.json").write_text(text)
    print(text)
    return 0


def cmd_ablate(args) -> int:
    from .experiments import DeskProtocol, desk_train_config, format_table, run_grid

    base = desk_train_config()
    overrides = _read_json(args.config)
    flags = {"labeled_ratio_n": args.ratio_n, "tau": args.tau, "eps": args.eps, "vat_mode": args.vat_mode,
             "epochs": args.epochs}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    if overrides:
        d = base.to_dict()
        d.update(overrides)
        base = TrainConfig.from_dict(d)
    protocol = DeskProtocol(n_train=args.n_train, n_test=args.n_test, seeds=tuple(args.seeds), base=base)
    out = Path(args.out)
    _snapshot(out, "ablate", args, protocol.to_dict())
    data = protocol.datasets()
    tables = {}
    grids = args.grid.split(",")
    for grid in grids:
        if grid == "consistency":
            tables[grid] = run_grid(protocol, ["consistency_c", "consistency_cg", "ss_psd"], out, data=data)
        elif grid == "vat":
            tables[grid] = run_grid(protocol, ["s_vat", "t_vat", "ss_psd"], out, data=data)
        elif grid == "baseline":
            tables[grid] = run_grid(protocol, ["supervised", "ss_psd"], out, data=data)
        elif grid == "tau":
            extra = {f"tau_{t:.1f}": {"tau": round(t, 1)} for t in np.arange(0.1, 0.95, 0.1)}
            tables[grid] = run_grid(protocol, list(extra), out, extra=extra, data=data)
        elif grid == "eps":
            extra = {f"eps_{e:g}": {"eps": e} for e in (10.0, 1.0, 0.1)}
            tables[grid] = run_grid(protocol, list(extra), out, extra=extra, data=data)
        else:
            raise UsageError(f"unknown grid {grid!r}; choose from consistency, vat, baseline, tau, eps")
    (out / "ablation.json").write_text(json.dumps(tables, indent=2, sort_keys=True))
    text = "\n\n".join(f"## {g}\n\n{format_table(t)}" for g, t in tables.items())
    (out / "ablation.md").write_text(text + "\n")
    print(text)
    return 0


# -- parser -----------------------------------------------------------------

def _common_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--ratio-n", type=int, help="label 1/n of the training images")
    p.add_argument("--tau", type=float, help="teacher confidence threshold for the consistency mask")
    p.add_argument("--eps", type=float, help="latent noise norm")
    p.add_argument("--vat-mode", choices=("robust_min", "aggressive_max"))
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sspsd", description="Semi-supervised parking-slot detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a teacher-student detector")
    _common_train_flags(p)
    p.add_argument("--data", required=True, help="directory of images with JSON sidecars")
    p.add_argument("--val-data", help="validation directory (default: carve from --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--deterministic", action="store_true", help="force deterministic mode")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP of a checkpoint or of stored detections")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="directory of per-image detection JSON (as written by infer)")
    p.add_argument("--model", choices=("teacher", "student"), default="teacher")
    p.add_argument("--template", help="JSON file with TemplateConfig fields")
    p.add_argument("-I", type=float, default=round(I_512, 2), help="position tolerance in pixels")
    p.add_argument("-B", type=float, default=DEFAULT_B, help="angle tolerance in degrees")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect slots in a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=("teacher", "student"), default="teacher")
    p.add_argument("--template")
    p.add_argument("--no-overlay", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clean", action="store_true", help="no noise, texture or occluders")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablate", help="desk-scale comparison grid on synthetic data")
    _common_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="consistency,vat",
                   help="comma list of: consistency, vat, baseline, tau, eps")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=300)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"sspsd: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"sspsd: non-finite loss at batch {exc.batch_index}: {exc}", file=sys.stderr)
        return 2
    except (UsageError, SSPSDError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"sspsd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
