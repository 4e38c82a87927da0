"""Batch command-line front end: ``ascnet {synth,train,segment,eval,plot}``.

Exit status: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import ConfigError, RunConfig, load_config, write_config
from .evaluate import (
    emit_branch_panel,
    emit_disjoincy_strip,
    emit_histogram_figure,
    evaluate_dataset,
)
from .model import forward_main
from .segment import pooled_threshold, segment_slice
from .trainer import load_state, run_training

log = logging.getLogger("ascnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat dotted-key config file")
    p.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set train.stage1_cycles=3",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="ascnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic reference/query corpus")
    p.add_argument("--n-ref", type=int)
    p.add_argument("--n-query", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--polarity", choices=("bright", "dark"))

    p = sub.add_parser("train", parents=[common], help="two-stage adversarial training")
    p.add_argument("--reference-dir", type=Path)
    p.add_argument("--query-dir", type=Path)
    p.add_argument("--manifest", type=Path, help="volumetric corpus manifest (CSV)")
    p.add_argument("--fold", type=int)
    p.add_argument("--stage1-cycles", type=int)
    p.add_argument("--stage2-cycles", type=int)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")

    p = sub.add_parser("segment", parents=[common], help="segment query images with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--query-dir", type=Path)
    p.add_argument("--region-dir", type=Path)
    p.add_argument("--polarity", choices=("bright", "dark"))
    p.add_argument("--threshold", help="'auto' or a fixed level 0..255")
    p.add_argument("--post-process", action="store_true", default=None)

    p = sub.add_parser("eval", parents=[common], help="Dice of predicted vs ground-truth masks")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--grouping", choices=("slice", "subject"), default="slice")

    p = sub.add_parser("plot", parents=[common], help="diagnostic figures")
    p.add_argument("kind", choices=("histogram", "panel", "disjoincy"))
    p.add_argument("inputs", nargs="*", type=Path, help="images or directories (histogram)")
    p.add_argument("--seg-dir", type=Path, help="output directory of `segment` (panel, disjoincy)")
    p.add_argument("--query-dir", type=Path)
    p.add_argument("--gt-dir", type=Path)
    p.add_argument("-n", "--n-samples", type=int, default=3)
    p.add_argument("--name", default="figure.png")
    return parser


def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": str(args.out)}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    flag_keys = {
        "n_ref": "synth.n_ref",
        "n_query": "synth.n_query",
        "size": "synth.size",
        "reference_dir": "data.reference_dir",
        "query_dir": "data.query_dir",
        "manifest": "data.manifest",
        "fold": "data.fold",
        "stage1_cycles": "train.stage1_cycles",
        "stage2_cycles": "train.stage2_cycles",
        "region_dir": "segment.region_dir",
        "threshold": "segment.threshold",
        "post_process": "segment.post_process",
    }
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = str(v) if isinstance(v, Path) else v
    if getattr(args, "polarity", None) is not None:
        overrides["synth.polarity" if args.command == "synth" else "segment.polarity"] = args.polarity
    cfg = load_config(args.config, overrides)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    return cfg


def _dir(path: str, what: str) -> Path:
    p = Path(path)
    if not path or not p.is_dir():
        raise ValidationError(f"{what} directory not found: {path or '(unset)'}")
    return p


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    reference, query = D.synth_generate(cfg.synth, cfg.seed)
    D.save_dataset(reference, out, "reference")
    D.save_dataset(query, out, "query")
    write_config(cfg, out / "config.resolved.toml")
    print(f"wrote {len(reference)} reference and {len(query)} query images to {out}")
    return EXIT_OK


def _training_sets(cfg: RunConfig):
    size = cfg.network.input_size
    if cfg.data.manifest:
        manifest = Path(cfg.data.manifest)
        if not manifest.is_file():
            raise ValidationError(f"manifest not found: {manifest}")
        corpus = D.load_manifest(manifest, size, axis=cfg.data.slice_axis)
        folds = D.split_crossval(corpus, cfg.data.folds, cfg.data.train_fraction, cfg.seed)
        if not 0 <= cfg.data.fold < len(folds):
            raise ValidationError(f"fold {cfg.data.fold} out of range")
        fold = folds[cfg.data.fold]
        reference, query = fold.train_reference, fold.train_query
    else:
        ref_dir = _dir(cfg.data.reference_dir, "reference")
        query_dir = _dir(cfg.data.query_dir, "query")
        reference = D.load_image_dir(ref_dir, D.Role.REFERENCE, size=size)
        query = D.load_image_dir(query_dir, D.Role.QUERY, size=size)
    if len(reference) == 0 or len(query) == 0:
        raise ValidationError("reference and query sets must both be non-empty")
    return D.balance_sets(reference, query, cfg.seed)


def cmd_train(cfg: RunConfig, resume: Path | None = None) -> int:
    reference, query = _training_sets(cfg)
    out = Path(cfg.out)
    state = None
    if resume is not None:
        if not resume.is_file():
            raise ValidationError(f"checkpoint not found: {resume}")
        state = load_state(resume)
        cfg.network, cfg.train = state.spec, state.schedule
    write_config(cfg, out / "config.resolved.toml")
    state = run_training(cfg.train, reference, query, spec=cfg.network, out_dir=out, state=state)
    print(f"trained {state.cycle} cycles (stage {state.stage}); checkpoints in {out}")
    return EXIT_OK


def cmd_segment(cfg: RunConfig, checkpoint: Path) -> int:
    if not checkpoint.is_file():
        raise ValidationError(f"checkpoint not found: {checkpoint}")
    seg = cfg.segment
    level = seg.threshold_level()
    region_dir = Path(seg.region_dir) if seg.region_dir else None
    if region_dir is not None and not region_dir.is_dir():
        raise ValidationError(f"region directory not found: {region_dir}")
    state = load_state(checkpoint)
    query = D.load_image_dir(
        _dir(cfg.data.query_dir, "query"), D.Role.QUERY, region_dir=region_dir, size=state.spec.input_size
    )
    images = query.stack()
    fence, wild, recon = [], [], []
    with torch.no_grad():
        for i in range(0, len(images), 32):
            o = forward_main(state.main, torch.from_numpy(images[i : i + 32]), False)
            fence.append(o.fence.numpy())
            wild.append(o.wild.numpy())
            recon.append(o.recon.numpy())
    fence, wild, recon = (np.concatenate(a).astype(np.float64) for a in (fence, wild, recon))
    regions = query.regions
    peak_kw = {"min_prominence_fraction": seg.min_prominence_fraction, "smoothing_window": seg.smoothing_window}
    if level == "auto":
        level = pooled_threshold(recon, seg.polarity, regions, **peak_kw)
    out = Path(cfg.out)
    for i, name in enumerate(query.names):
        res = segment_slice(recon[i], seg.polarity, level, None if regions is None else regions[i], seg.post_process)
        D.write_mask(out / "masks" / f"{name}.png", res.mask)
        for sub, arr in (("recon", recon), ("fence", fence), ("wild", wild)):
            D.write_image(out / sub / f"{name}.png", arr[i])
    meta = {
        "threshold_level": int(level),
        "polarity": seg.polarity,
        "post_processed": bool(seg.post_process),
        "checkpoint": str(checkpoint),
        "n_slices": len(query),
    }
    (out / "masks" / "segmentation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_config(cfg, out / "config.resolved.toml")
    print(f"threshold level {level} ({seg.polarity}); {len(query)} masks in {out / 'masks'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, pred_dir: Path, gt_dir: Path, grouping: str) -> int:
    preds = D.list_images(_dir(str(pred_dir), "prediction"))
    gt_names = {p.name for p in D.list_images(_dir(str(gt_dir), "ground-truth"))}
    pred_names = {p.name for p in preds}
    if pred_names != gt_names:
        missing = sorted(pred_names ^ gt_names)[:5]
        raise ValidationError(f"prediction and ground-truth filenames differ, e.g. {missing}")
    names = [p.stem for p in preds]
    pm = [D.read_mask(p) for p in preds]
    gm = [D.read_mask(gt_dir / p.name) for p in preds]
    post = False
    meta_file = pred_dir / "segmentation.json"
    if meta_file.is_file():
        post = bool(json.loads(meta_file.read_text()).get("post_processed", False))
    report = evaluate_dataset(pm, gm, names, grouping, post_processed=post)
    out = Path(cfg.out)
    report.write_csv(out / "eval.csv")
    write_config(cfg, out / "config.resolved.toml")
    print(report.summary())
    return EXIT_OK


def _gather(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(D.list_images(p))
        elif p.is_file():
            files.append(p)
        else:
            raise ValidationError(f"input not found: {p}")
    return files


def cmd_plot(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / args.name
    n = args.n_samples
    if args.kind == "histogram":
        files = _gather(args.inputs)
        if not files:
            raise ValidationError("histogram plot needs at least one input image")
        emit_histogram_figure([D.read_image(f) for f in files], target, labels=[f.name for f in files])
    else:
        seg_dir = _dir(str(args.seg_dir or ""), "segment output")
        names = [p.name for p in D.list_images(seg_dir / "recon")][:n]
        load = lambda sub: np.stack([D.read_image(seg_dir / sub / nm) for nm in names])
        if args.kind == "disjoincy":
            emit_disjoincy_strip(load("fence")[0], load("wild")[0], target)
        else:
            query_dir = _dir(str(args.query_dir or cfg.data.query_dir), "query")
            I_in = np.stack([D.read_image(query_dir / nm) for nm in names])
            est = np.stack([D.read_mask(seg_dir / "masks" / nm) for nm in names])
            gt = None
            if args.gt_dir is not None:
                gt = np.stack([D.read_mask(Path(args.gt_dir) / nm) for nm in names])
            emit_branch_panel(I_in, load("fence"), load("wild"), load("recon"), est, target, M_gt=gt)
    print(f"wrote {target}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = _resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "segment":
            return cmd_segment(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred_dir, args.gt_dir, args.grouping)
        return cmd_plot(cfg, args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"ascnet: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.exception("runtime failure")
        print(f"ascnet: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
