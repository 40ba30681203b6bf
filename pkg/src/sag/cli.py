"""Command-line interface.

Commands::

    sag gen-data          synthesize a dataset directory with a manifest
    sag build-guidance    write TG / HG guidance JSON for every slide
    sag train             multi-seed training; metrics stream, report, checkpoints
    sag eval              evaluate a checkpoint on a dataset split
    sag render-attention  attention heatmap and guidance rasters for one slide

Outputs go to ``--out`` or, by default, to a per-command folder under the
output root (``$SAG_OUT``, falling back to ``./sag-out``). Every command
writes ``config.resolved.json`` next to its outputs; passing that file back
through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from sag.config import ExperimentConfig, load_config
from sag.grid import write_pgm
from sag.guidance import HG, TG
from sag.harness import (
    DivergenceError,
    evaluate,
    quality_keys,
    slide_guidance,
    to_tensors,
    train,
)
from sag.io import atomic_write_text, write_json
from sag.models import load_checkpoint, save_checkpoint
from sag.synth import SPLITS, generate_dataset, load_dataset, write_dataset

log = logging.getLogger("sag")

SNAPSHOT = "config.resolved.json"
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    """Bad input from the command line; reported without a traceback."""


# ---------------------------------------------------------------------------
# Shared plumbing


def output_root() -> Path:
    return Path(os.environ.get("SAG_OUT") or "sag-out")


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else output_root() / default_name


def _prepare_out(out: Path, force: bool) -> Path:
    """Refuse a non-empty directory unless ``force``.

    With ``force`` a directory holding a previous run (it has a config
    snapshot) is cleared so stale files cannot survive; any other directory
    is written into but never deleted.
    """
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        if (out / SNAPSHOT).exists():
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: ExperimentConfig, command: str, inputs: dict) -> None:
    write_json(out / SNAPSHOT, cfg.to_dict())
    write_json(out / "invocation.json", {"command": command, "inputs": inputs})


def _config(args, *, seed_sets_data: bool = True) -> ExperimentConfig:
    overrides = list(args.override or [])
    seed = None
    if args.seed is not None:
        if seed_sets_data:
            seed = args.seed
        else:
            overrides.append(f"seeds=[{int(args.seed)}]")
    try:
        return load_config(args.config, overrides, seed)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _with_dataset_spec(cfg: ExperimentConfig, spec) -> ExperimentConfig:
    """Adopt the slide spec a dataset was generated with."""
    return dataclasses.replace(cfg, slide=spec,
                               model=dataclasses.replace(cfg.model))


def _load_data(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} has no manifest.json; run gen-data first")
    return load_dataset(path)


def _find_slide(datasets: dict, slide_id: str):
    for slides in datasets.values():
        for sl in slides:
            if sl.slide_id == slide_id:
                return sl
    raise UsageError(f"slide {slide_id!r} not found in dataset")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(_out_dir(args, "data"), args.force)
    datasets = generate_dataset(cfg.slide, cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed)
    manifest = write_dataset(out, cfg.slide, datasets)
    _snapshot(out, cfg, "gen-data", {})
    log.info("wrote %s slides to %s", len(manifest["slides"]), out)
    return 0


def _guidance_files(slide, cfg: ExperimentConfig, kinds) -> dict:
    g = slide_guidance(slide, cfg)
    files = {}
    for s, per_kind in g.items():
        suffix = "" if s == 0 else f".s{s}"
        for kind in kinds:
            files[f"{slide.slide_id}.{kind.lower()}{suffix}.json"] = per_kind[kind].to_json()
    return files


def cmd_build_guidance(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data) if args.data else output_root() / "data"
    spec, datasets = _load_data(data_dir)
    cfg = _with_dataset_spec(cfg, spec)
    kinds = {"tg": (TG,), "hg": (HG,), "both": (TG, HG)}[args.kind]
    out = _prepare_out(_out_dir(args, "guidance"), args.force)
    slides = [sl for split in SPLITS for sl in datasets.get(split, [])]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_guidance_files, slides, [cfg] * len(slides),
                                    [kinds] * len(slides)))
    else:
        results = [_guidance_files(sl, cfg, kinds) for sl in slides]
    n = 0
    for files in results:
        for name, obj in files.items():
            write_json(out / name, obj)
            n += 1
    _snapshot(out, cfg, "build-guidance", {"data": str(data_dir), "kind": args.kind})
    log.info("wrote %d guidance files to %s", n, out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, seed_sets_data=False)
    inputs = {}
    if args.data:
        spec, datasets = _load_data(args.data)
        cfg = _with_dataset_spec(cfg, spec)
        inputs["data"] = str(args.data)
    else:
        datasets = generate_dataset(cfg.slide, cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed)
    out = _prepare_out(_out_dir(args, "train"), args.force)
    _snapshot(out, cfg, "train", inputs)
    data = {split: to_tensors(slides, cfg) for split, slides in datasets.items()}

    stream = io.StringIO()
    try:
        report, models = train(cfg, data, stream=stream, workers=args.workers, keep_models=True)
    except DivergenceError as exc:
        atomic_write_text(out / "metrics.jsonl", stream.getvalue())
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    atomic_write_text(out / "metrics.jsonl", stream.getvalue())
    write_json(out / "report.json", report.to_json())
    for seed, model in zip(cfg.seeds, models):
        save_checkpoint(out / "checkpoints" / f"seed_{seed}.ckpt", model,
                        {"seed": seed, "config": cfg.to_dict()})
    if not args.no_figures:
        from sag.plotting import save_loss_curves_png

        entries = [json.loads(line) for line in stream.getvalue().splitlines()]
        save_loss_curves_png(out / "loss_curves.png", entries, title=cfg.model.kind)
    log.info("mean test metrics: %s", report.mean)
    return 0


def _checkpoint_config(header: dict, args) -> ExperimentConfig:
    stored = header.get("extra", {}).get("config")
    if stored is None:
        raise UsageError("checkpoint carries no experiment config")
    cfg = ExperimentConfig.from_dict(stored)
    if args.config or args.override:
        raise UsageError("eval and render-attention take their config from the checkpoint")
    return cfg


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(header, args)
    data_dir = Path(args.data) if args.data else output_root() / "data"
    spec, datasets = _load_data(data_dir)
    if args.split not in datasets or not datasets[args.split]:
        raise UsageError(f"split {args.split!r} is empty or missing")
    cfg = _with_dataset_spec(cfg, spec)
    if cfg.model.e != model.cfg.e or cfg.model.num_classes != model.cfg.num_classes:
        raise UsageError("checkpoint and dataset disagree on feature width or class count")
    out = _prepare_out(_out_dir(args, "eval"), args.force)
    metrics = evaluate(model, to_tensors(datasets[args.split], cfg))
    write_json(out / "eval.json", {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "seed": header.get("extra", {}).get("seed"),
        "precision_recall_averaging": "macro",
        "auc": "macro one-vs-rest, trapezoidal",
        "metrics": metrics,
    })
    _snapshot(out, cfg, "eval", {"checkpoint": str(args.checkpoint), "data": str(data_dir)})
    log.info("%s", metrics)
    return 0


def cmd_render_attention(args) -> int:
    from sag.plotting import heatmap_raster, side_by_side

    model, header = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(header, args)
    data_dir = Path(args.data) if args.data else output_root() / "data"
    spec, datasets = _load_data(data_dir)
    cfg = _with_dataset_spec(cfg, spec)
    slide = _find_slide(datasets, args.slide)
    if not 0 <= args.scale < len(slide.bags):
        raise UsageError(f"scale {args.scale} out of range")
    out = _prepare_out(_out_dir(args, f"render/{slide.slide_id}"), args.force)

    tensors = to_tensors([slide], cfg)
    model.eval()
    with torch.no_grad():
        _, record = model(tensors.features, tensors.positions)
    if args.head:
        layer, head = (int(x) for x in args.head.split(","))
        keys = [(args.scale, layer, head)]
        if keys[0] not in record.entries:
            raise UsageError(f"no attention head {layer},{head}")
    else:
        keys = [k for k in quality_keys(record, model.cfg.partition()) if k[0] == args.scale]
    att = np.mean([record[k][0].numpy() for k in keys], axis=0)

    grid = slide.bags[args.scale].grid
    g = slide_guidance(slide, cfg)[args.scale]
    heat = heatmap_raster(att, grid)
    hg = heatmap_raster(g[HG].weights, grid)
    tg = heatmap_raster(g[TG].weights, grid)
    write_pgm(out / "attention.pgm", heat, maxval=255)
    write_pgm(out / "guidance_hg.pgm", hg, maxval=255)
    write_pgm(out / "guidance_tg.pgm", tg, maxval=255)
    write_pgm(out / "side_by_side.pgm", side_by_side([heat, hg, tg]), maxval=255)
    write_json(out / "attention.json", {
        "slide": slide.slide_id, "scale": args.scale, "heads": [list(k) for k in keys],
        "grid": grid.to_dict(), "attention": att.tolist(),
    })
    if args.png:
        from sag.plotting import save_heatmap_png

        save_heatmap_png(out / "attention.png",
                         {"attention": heat, "HG": hg, "TG": tg}, slide.raster)
    _snapshot(out, cfg, "render-attention", {
        "checkpoint": str(args.checkpoint), "data": str(data_dir), "slide": slide.slide_id,
    })
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, metavar="N",
                        help="data seed (gen-data, build-guidance) or single training seed (train)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--workers", type=int, default=1, metavar="N")
    common.add_argument("--override", action="append", metavar="K=V", default=[],
                        help="config override, dotted keys reach model.* and slide.*; repeatable")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sag", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("build-guidance", parents=[common], help="write guidance JSON per slide")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--kind", choices=("tg", "hg", "both"), default="both")

    p = sub.add_parser("train", parents=[common], help="train over the configured seeds")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: generate in memory)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG loss curves")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--split", default="test", choices=SPLITS)

    p = sub.add_parser("render-attention", parents=[common], help="export attention heatmaps")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--slide", required=True, metavar="ID")
    p.add_argument("--scale", type=int, default=0)
    p.add_argument("--head", metavar="L,H", help="one head instead of the supervised-head mean")
    p.add_argument("--png", action="store_true", help="also render a PNG figure")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-guidance": cmd_build_guidance,
    "train": cmd_train,
    "eval": cmd_eval,
    "render-attention": cmd_render_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("sag: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sag {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
