"""Command line entry point.

Exit codes: 0 success (possibly with skipped inputs), 1 configuration
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from wavediff.nn.checkpoint import Checkpoint, CheckpointError
from wavediff.nn.layers import ConfigError
from wavediff.nn.train import NumericalError
from wavediff.pipeline import (
    DataError,
    PipelineConfig,
    evaluate_dirs,
    generate_shapes,
    load_dataset,
    prepare_dataset,
    prepare_mesh,
    run_ablation,
    run_train_detail,
    run_train_generator,
)
from wavediff.volume import InvalidConfigError, InvalidInputError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("wavediff")


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if args.config else PipelineConfig()


def cmd_prepare(args) -> int:
    cfg = _config(args)
    cfg = cfg.override("tsdf", resolution=args.res, truncation=args.truncation)
    cfg = cfg.override("wavelet", level=args.level, filters=args.filters)
    src, out = Path(args.inp), Path(args.out)
    if src.is_dir():
        manifest = prepare_dataset(src, out, cfg)
        print(f"prepared {len(manifest.ok)} pairs ({manifest.computed} computed, {manifest.skipped} unchanged), "
              f"{len(manifest.failed)} failed")
        for e in manifest.failed:
            log.warning("failed: %s: %s", e.source, e.error)
        return EXIT_OK
    if not src.exists():
        raise DataError(f"{src} does not exist")
    stats = prepare_mesh(src, out, cfg)
    print(json.dumps({"output": str(out), **stats}, sort_keys=True))
    return EXIT_OK


def cmd_train_gen(args) -> int:
    cfg = _config(args)
    cfg = cfg.override("train_generator", iters=args.iters, lr=args.lr, seed=args.seed, batch=args.batch)
    pairs = load_dataset(args.data)
    if args.res is not None and args.res != pairs[0].coarse.resolution:
        raise InvalidConfigError(f"--res {args.res} but the data has coarse resolution {pairs[0].coarse.resolution}")
    cfg = _data_config(cfg, pairs)
    ckpt = run_train_generator(pairs, cfg, args.out, args.log)
    print(f"wrote {args.out} after {ckpt.meta.get('iters')} iterations")
    return EXIT_OK


def cmd_train_detail(args) -> int:
    cfg = _config(args)
    cfg = cfg.override("train_detail", iters=args.iters, lr=args.lr, seed=args.seed, batch=args.batch)
    pairs = load_dataset(args.data)
    cfg = _data_config(cfg, pairs)
    ckpt = run_train_detail(pairs, cfg, args.out, args.log)
    print(f"wrote {args.out} after {ckpt.meta.get('iters')} iterations")
    return EXIT_OK


def _data_config(cfg: PipelineConfig, pairs) -> PipelineConfig:
    """Adopt the resolution and level recorded in the prepared pairs."""
    meta = pairs[0].source_meta
    tsdf = meta if meta is not None else cfg.tsdf
    try:
        return replace(cfg, tsdf=tsdf, wavelet=replace(cfg.wavelet, level=pairs[0].level))
    except ValueError as exc:
        raise InvalidConfigError(f"prepared data does not fit the config: {exc}") from exc


def _checkpoint_config(args) -> PipelineConfig:
    """Grid and schedule settings come from the generator checkpoint.

    Without a config file the architectures are taken from the checkpoints
    too; with one, they are checked against it during generation.
    """
    cfg = _config(args)
    gen = Checkpoint.load(args.checkpoint)
    for section in ("tsdf", "wavelet", "schedule"):
        if section in gen.meta:
            cfg = cfg.override(section, **gen.meta[section])
    if not args.config:
        cfg = replace(cfg, generator=gen.config)
        if args.detail:
            cfg = replace(cfg, detail=Checkpoint.load(args.detail).config)
    return cfg


def cmd_generate(args) -> int:
    cfg = _checkpoint_config(args)
    cfg = cfg.override("sampling", steps_div=args.steps_div, seed=args.seed, count=args.count)
    paths = generate_shapes(args.checkpoint, args.detail, cfg.sampling.count, cfg, args.out_dir,
                            trace_dir=args.trace_dir)
    print(f"wrote {len(paths)} meshes to {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    cfg = cfg.override("evaluation", points=args.points, seed=args.seed)
    report = evaluate_dirs(args.gen, args.ref, cfg.evaluation.points, cfg.evaluation.seed)
    report.write_csv(args.out)
    for metric, kind, value, scale in report.rows():
        print(f"{metric}-{kind}: {value:.6g} (x{scale:g})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _checkpoint_config(args)
    cfg = cfg.override("sampling", steps_div=args.steps_div, seed=args.seed, count=args.count)
    cfg = cfg.override("evaluation", points=args.points)
    pairs = load_dataset(args.data)
    modes = ["full", "no-detail"] if args.mode == "both" else [args.mode]
    for mode in modes:
        report = run_ablation(mode, pairs, cfg, args.checkpoint, args.detail, args.out_dir)
        for metric, kind, value, scale in report.rows():
            print(f"{mode} {metric}-{kind}: {value:.6g} (x{scale:g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavediff", description="Wavelet-domain diffusion for 3D shapes.")
    p.add_argument("--config", help="JSON pipeline config; flags override its fields")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="mesh(es) to compact wavelet pairs")
    s.add_argument("--in", dest="inp", required=True, help="an OBJ file or a directory of OBJ files")
    s.add_argument("--out", required=True, help=".wvp file, or output directory for a mesh directory")
    s.add_argument("--res", type=int)
    s.add_argument("--level", type=int)
    s.add_argument("--filters")
    s.add_argument("--truncation", type=float)
    s.set_defaults(func=cmd_prepare)

    for name, func, help_ in (("train-gen", cmd_train_gen, "train the coarse-volume denoiser"),
                              ("train-detail", cmd_train_detail, "train the detail predictor")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", required=True, help="directory of prepared .wvp files")
        s.add_argument("--iters", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="checkpoint path")
        s.add_argument("--log", help="loss log CSV (iter,loss)")
        if name == "train-gen":
            s.add_argument("--res", type=int, help="expected coarse resolution of the data")
        s.set_defaults(func=func)

    s = sub.add_parser("generate", help="sample shapes to OBJ meshes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--detail", help="detail checkpoint; omitted means zero detail")
    s.add_argument("--count", type=int)
    s.add_argument("--steps-div", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--trace-dir", help="dump every visited step as .vol files")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="MMD / COV / 1-NNA between two mesh directories")
    s.add_argument("--gen", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--points", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="full pipeline vs no detail predictor")
    s.add_argument("--data", required=True, help="prepared training pairs used as the reference set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--detail", required=True)
    s.add_argument("--mode", choices=["full", "no-detail", "both"], default="both")
    s.add_argument("--count", type=int)
    s.add_argument("--steps-div", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--points", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidConfigError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InvalidInputError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
