#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Command-line interface
======================
    maf-detector gen-data  --out DATA
    maf-detector train     --data DATA --out RUN [--config FILE] [--variant NAME]
    maf-detector eval      --data DATA --run RUN
    maf-detector sweep-iou --data DATA --run RUN
    maf-detector ablate    --data DATA --out DIR [--seeds 0,1,2] [--jobs N]
    maf-detector gradcheck [--case NAME ...]
    maf-detector plot      --csv FILE --out FILE.svg

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .config_manager import VARIANTS, ConfigError, ConfigManager, LoggingConfig, RunConfig, apply_variant

logger = logging.getLogger(__name__)

TOOL = "maf-detector"
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VERIFY = 3
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class GradcheckFailure(Exception):
    """At least one gradient check exceeded its tolerance"""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(settings: LoggingConfig, quiet: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if settings.file:
        handlers.append(logging.handlers.RotatingFileHandler(
            settings.file, maxBytes=settings.max_size, backupCount=settings.backup_count, encoding="utf-8"))
    level = logging.WARNING if quiet else getattr(logging, settings.level.upper())
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog=TOOL, description="Adversarially adapted miniature detector")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value config file (or .json)")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key, repeatable")
        p.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    p = sub.add_parser("gen-data", help="write the synthetic source/target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-source", type=int, default=200)
    p.add_argument("--n-target", type=int, default=200)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", choices=("fog", "camera"), default="fog")
    p.add_argument("--fog-alpha", type=float, default=0.45)
    p.add_argument("--reverse", action="store_true", help="shifted images form the labelled source")
    p.add_argument("--classes", default="", help="comma-separated subset of disc,square,triangle")
    common(p)

    p = sub.add_parser("train", help="train a detector with adversarial alignment")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", type=int, help="stop once this many iterations are done")
    common(p)

    for name, text in (("eval", "per-class AP and mAP on the validation split"),
                       ("sweep-iou", "mAP against IoU threshold")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--run", required=True, help="training output directory")
        p.add_argument("--out", help=f"output directory (default: RUN/{name})")
        if name == "eval":
            p.add_argument("--iou-thr", type=float, default=0.5)
        common(p, config=False)

    p = sub.add_parser("ablate", help="train and evaluate every ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--variants", default=",".join(VARIANTS))
    common(p)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--case", action="append", default=[], help="run only this case, repeatable")
    p.add_argument("--out", default="gradcheck")
    common(p, config=False)

    p = sub.add_parser("plot", help="chart losses.csv or sweep.csv (format from the --out suffix)")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    common(p, config=False)
    return parser


def load_config(args) -> ConfigManager:
    config = ConfigManager(getattr(args, "config", None))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        config.set(key.strip(), value.strip())
    if getattr(args, "variant", None):
        config = apply_variant(config, args.variant)
    return config


def config_from_run(run_dir: Path) -> RunConfig:
    path = run_dir / "run.json"
    record = json.loads(path.read_text(encoding="utf-8"))
    try:
        return ConfigManager.from_flat(record["config"]).to_run_config()
    except KeyError:
        raise ConfigError(f"{path} has no config section") from None


def write_run_record(out_dir: Path, command: str, args, cfg: RunConfig) -> Path:
    """run.json: everything needed to replay the command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "command"},
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_flat().items()},
        "config_hash": cfg.config_hash(),
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .synthetic_domains import CLASS_NAMES, SceneSpec, ShiftSpec, write_dataset

    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip()) or CLASS_NAMES
    size = cfg.data.image_size
    # object sizes shrink with the canvas below 96 px
    max_size = min(SceneSpec.max_size, size // 2)
    scene = SceneSpec(image_size=size, classes=classes, min_size=min(SceneSpec.min_size, max_size),
                      max_size=max_size, seed=args.seed)
    shift = ShiftSpec(kind=args.shift, fog_alpha=args.fog_alpha)
    out = Path(args.out)
    write_dataset(out, args.n_source, args.n_target, scene, shift, n_val=args.n_val,
                  reverse=args.reverse, quiet=args.quiet)
    write_run_record(out, "gen-data", args, cfg)
    print(f"Dataset written to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .synthetic_domains import read_dataset
    from .training import Trainer

    dataset = read_dataset(args.data)
    out = Path(args.out)
    write_run_record(out, "train", args, cfg)
    trainer = Trainer(cfg, dataset, out, quiet=args.quiet)
    history = trainer.run(resume=args.resume, stop_after=args.stop_after)
    if history:
        last = history[-1]
        print(f"iteration {trainer.iteration}: l_det={last.l_det:.4f} l_t={last.l_t:.4f} l_maf={last.l_maf:.4f}")
    return 0


def _load_for_eval(args):
    from .synthetic_domains import read_dataset
    from .training import load_model

    run_dir = Path(args.run)
    cfg = config_from_run(run_dir)
    dataset = read_dataset(args.data)
    model = load_model(run_dir, cfg, len(dataset.classes))
    out = Path(args.out) if args.out else run_dir / args.command
    return cfg, dataset, model, out


def cmd_eval(args, _cfg: Optional[RunConfig]) -> int:
    from .evaluation import evaluate_map

    cfg, dataset, model, out = _load_for_eval(args)
    result = evaluate_map(model.detector, dataset.val, dataset.classes, args.iou_thr, quiet=args.quiet)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", result.to_dict())
    write_run_record(out, "eval", args, cfg)
    for c in result.classes:
        ap = "n/a" if c.ap is None else f"{c.ap:.4f}"
        print(f"{c.name:<10} AP {ap}  (gt {c.n_gt}, det {c.n_det})")
    print(f"mAP@{args.iou_thr:g} = {result.map:.4f}")
    return 0


def cmd_sweep(args, _cfg: Optional[RunConfig]) -> int:
    from .evaluation import iou_sweep, write_sweep_csv

    cfg, dataset, model, out = _load_for_eval(args)
    rows = iou_sweep(model.detector, dataset.val, dataset.classes, quiet=args.quiet)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    write_run_record(out, "sweep-iou", args, cfg)
    for threshold, value in rows:
        print(f"{threshold:.2f}  {value:.4f}")
    return 0


def cmd_ablate(args, cfg: RunConfig, config: ConfigManager) -> int:
    from .ablation import ablation_grid

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant {unknown[0]!r}")
    if not args.seeds:
        raise ConfigError("--seeds needs at least one seed")
    out = Path(args.out)
    write_run_record(out, "ablate", args, cfg)
    report = ablation_grid(config, args.data, out, args.seeds, variants, max(1, args.jobs))
    for variant in variants:
        print(f"{variant:<14} mAP@0.5 {report[variant]['map50']:.4f}")
    return 0


def cmd_gradcheck(args, _cfg: Optional[RunConfig]) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.case or None)
    out = Path(args.out)
    write_run_record(out, "gradcheck", args, RunConfig())
    _write_json(out / "gradcheck.json", {r.name: {"max_rel_err": float(r.max_rel_err),
                                                  "tolerance": float(r.tolerance),
                                                  "passed": bool(r.passed), "seed": int(r.seed)}
                                         for r in reports})
    for report in reports:
        print(report.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise GradcheckFailure(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_plot(args, _cfg: Optional[RunConfig]) -> int:
    from .plotting import write_plot

    path = write_plot(args.csv, args.out)
    print(f"Plot written to {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args) if hasattr(args, "set") else ConfigManager()
        cfg = config.to_run_config()
        setup_logging(cfg.logging, args.quiet)
        if args.command == "gen-data":
            return cmd_gen_data(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        if args.command == "sweep-iou":
            return cmd_sweep(args, cfg)
        if args.command == "ablate":
            return cmd_ablate(args, cfg, config)
        if args.command == "gradcheck":
            return cmd_gradcheck(args, cfg)
        return cmd_plot(args, cfg)
    except GradcheckFailure as e:
        logger.error(str(e))
        return EXIT_VERIFY
    except OSError as e:
        logger.error(str(e))
        print(f"{TOOL}: error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        logger.error(str(e))
        print(f"{TOOL}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
