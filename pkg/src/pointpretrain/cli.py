"""Command-line entry point.

Subcommands: gen-data, pretrain, check, probe, view-shift, export-features.
Every run echoes its fully resolved configuration before doing anything, so
a run is replayable from its own log.  Exit codes: 0 success, 1 verification
failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .datagen import (DataFormatError, GeneratorConfig, generate_dataset,
                      read_dataset, write_dataset)
from .losses import LossInputError
from .model import Model, ModelConfigError
from .training import (ConfigError, NonFiniteLossError, ProbeConfig, TrainConfig,
                       export_features, load_model, pretrain, probe, view_shift_eval)
from .verify import run_suite

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_IO = 3

_CONFIG_ERRORS = (ConfigError, DataFormatError, CheckpointError, ModelConfigError,
                  LossInputError, ValueError)


def _echo_config(name: str, resolved: dict) -> None:
    print(f"resolved config ({name}): {json.dumps(resolved, sort_keys=True)}")


def _limit_threads(n: int | None) -> None:
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master random seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; 1 selects the deterministic single-worker mode")
    parser.add_argument("--precision", choices=("float32", "float64"), default=None,
                        help="numeric precision override")


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force to overwrite)",
              file=sys.stderr)
        return EXIT_USAGE
    gen = GeneratorConfig(views_per_scene=args.views, teacher_dim=args.teacher_dim,
                          depth_height=args.height, depth_width=args.width)
    resolved = {"out": str(out), "scenes": args.scenes, "views": args.views,
                "seed": args.seed, "teacher_dim": args.teacher_dim,
                "depth_height": args.height, "depth_width": args.width}
    _echo_config("gen-data", resolved)
    samples = generate_dataset(gen, args.scenes, base_seed=args.seed)
    write_dataset(samples, out)
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"wrote {manifest['scene_count']} scenes x {manifest['views_per_scene']} views "
          f"({manifest['depth_height']}x{manifest['depth_width']} depth, "
          f"teacher_dim {manifest['teacher_dim']}) to {out}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        data.update(json.loads(path.read_text()))
    overrides = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "holdout_scenes": args.holdout,
        "precision": args.precision,
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if args.no_contrastive:
        data["disable_contrastive"] = True
    if args.no_mae:
        data["disable_mae"] = True
    return TrainConfig.from_dict(data)


def _cmd_pretrain(args) -> int:
    cfg = _load_train_config(args)
    _echo_config("pretrain", cfg.to_dict())
    samples = read_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else out_dir / "metrics.jsonl"
    log = print if args.verbose else None
    pretrain(samples, cfg, out_dir=out_dir, metrics_path=metrics_path, log=log)
    print(f"finished {cfg.steps} steps; checkpoints and metrics in {out_dir}")
    return EXIT_OK


def _cmd_check(args) -> int:
    _echo_config("check", {"suite": args.suite, "seed": args.seed})
    results = run_suite(args.suite, seed=args.seed)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFICATION if failed else EXIT_OK


def _resolve_model(args) -> tuple[Model, TrainConfig]:
    if args.random_init:
        cfg = TrainConfig(seed=args.seed)   # defaults; seed controls the fresh weights
        model = Model.init(cfg.model, seed=args.seed, dtype=cfg.dtype)
        return model, cfg
    if not args.checkpoint:
        raise ConfigError("either --checkpoint or --random-init is required")
    model, cfg, _ = load_model(args.checkpoint)
    return model, cfg


def _cmd_probe(args) -> int:
    model, cfg = _resolve_model(args)
    probe_cfg = ProbeConfig(hidden=args.hidden, steps=args.probe_steps,
                            learning_rate=args.probe_lr, seed=args.seed,
                            holdout_scenes=args.holdout or max(1, cfg.holdout_scenes))
    resolved = {"checkpoint": args.checkpoint, "random_init": args.random_init,
                "hidden": probe_cfg.hidden, "steps": probe_cfg.steps,
                "learning_rate": probe_cfg.learning_rate, "seed": probe_cfg.seed,
                "holdout_scenes": probe_cfg.holdout_scenes}
    _echo_config("probe", resolved)
    samples = read_dataset(args.data)
    arm = "random-init" if args.random_init else "pretrained"
    report = probe(samples, model, cfg, probe_cfg, arm=arm)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_view_shift(args) -> int:
    model, cfg = _resolve_model(args)
    resolved = {"checkpoint": args.checkpoint, "random_init": args.random_init,
                "gallery": args.gallery, "seed": args.seed}
    _echo_config("view-shift", resolved)
    samples = read_dataset(args.data)
    # prefer held-out scenes, topping up from the end if the holdout is small
    pool = samples[-max(cfg.holdout_scenes, args.gallery):]
    report = view_shift_eval(pool, model, cfg, gallery_size=args.gallery, seed=args.seed)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _cmd_export_features(args) -> int:
    model, cfg = _resolve_model(args)
    resolved = {"checkpoint": args.checkpoint, "random_init": args.random_init,
                "out": args.out, "seed": args.seed}
    _echo_config("export-features", resolved)
    samples = read_dataset(args.data)
    written = export_features(samples, model, cfg, args.out, seed=args.seed)
    print(f"wrote features for {len(written)} scenes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointpretrain",
        description="Multi-view point cloud pretraining: data generation, training, "
                    "verification suites, and frozen-feature evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--teacher-dim", type=int, default=32)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the pre-training loop")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--holdout", type=int, default=None,
                   help="scenes withheld from training (taken from the end)")
    p.add_argument("--metrics", default=None, help="metrics JSONL path")
    p.add_argument("--no-contrastive", action="store_true",
                   help="train with the reconstruction loss only")
    p.add_argument("--no-mae", action="store_true",
                   help="train with the alignment losses only")
    p.add_argument("--verbose", action="store_true", help="print each metrics line")
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain, seed=None)

    p = sub.add_parser("check", help="run oracle/property verification suites")
    p.add_argument("--suite", choices=("grads", "chamfer", "fps", "fusion", "all"),
                   default="all")
    _add_common(p)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("probe", help="frozen-feature pose regression probe")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true",
                   help="use a freshly initialized frozen encoder (control arm)")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--probe-steps", type=int, default=400)
    p.add_argument("--probe-lr", type=float, default=1e-2)
    p.add_argument("--holdout", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("view-shift", help="disjoint-view scene retrieval evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--gallery", type=int, default=16)
    _add_common(p)
    p.set_defaults(func=_cmd_view_shift)

    p = sub.add_parser("export-features", help="write per-scene pooled/patch features")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_export_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
