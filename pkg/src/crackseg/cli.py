"""Command-line entry point: ``crackseg <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure
(non-finite loss), 4 checkpoint version/format error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import checkpoint as ckpt
from . import dataio, evalkit
from .balancedloss import ClassWeights, compute_class_weights, lambda_case, lambda_case_label
from .config import DEFAULTS, ConfigError, dump_config, load_run_config, section
from .cracknet import SegConfig, build_cracknet, infer_probabilities, init_weights
from .detectnet import (DetectConfig, build_detector, evaluate_detector, load_detect_checkpoint,
                        save_detect_checkpoint, train_detector)
from .trainer import (NonFiniteLossError, TrainConfig, load_seg_checkpoint, make_total_loss,
                      train_segmenter, write_history_csv)

log = logging.getLogger("crackseg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _d(key):
    value = DEFAULTS[key]
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return value


# ---------------------------------------------------------------- helpers

def _seg_config(cfg) -> SegConfig:
    kw = dict(input_size=cfg["data.input_size"], use_batchnorm=cfg["model.use_batchnorm"])
    return SegConfig.tiny(**kw) if cfg["model.preset"] == "tiny" else SegConfig(**kw)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(**section(cfg, "train"))


def _detect_config(cfg) -> DetectConfig:
    d = section(cfg, "detect")
    d["weights_path"] = d["weights_path"] or None
    d["input_size"] = cfg["data.patch_size"]
    return DetectConfig(**d)


def _load_split(manifest, split, size, augment=False):
    if not Path(manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = dataio.read_manifest(manifest, split)
    if not records:
        raise UsageError(f"manifest {manifest} has no records in split {split!r}")
    samples = []
    for rec in records:
        image, mask = dataio.load_sample(rec, size)
        variants = dataio.augment(image, mask) if augment else [(image, mask)]
        samples.extend(variants)
    return records, samples


def _eval_planes(model, samples, which):
    tensors = [dataio.to_tensors(img, m)[0] for img, m in samples]
    return infer_probabilities(model, tensors, which)


def _report(model, samples, cfg, use_gf):
    probs = _eval_planes(model, samples, cfg["eval.output"])
    gts = [m for _, m in samples]
    guides = [evalkit.luma(img) for img, _ in samples] if use_gf else None
    gf = {"radius": cfg["eval.gf_radius"], "eps": cfg["eval.gf_eps"]}
    return evalkit.evaluate_dataset(probs, gts, guides=guides, gf_params=gf, fixed_m=cfg["eval.threshold"])


def _train_seg(cfg, manifest, out_dir, resume=None, lam_case=None, quiet=False):
    seg_cfg = _seg_config(cfg)
    train_cfg = _train_config(cfg)
    _, samples = _load_split(manifest, "train", seg_cfg.input_size, cfg["data.augment"])
    weights = compute_class_weights(m for _, m in samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights.save(out_dir / "class_weights.json")
    dataset = [dataio.to_tensors(img, m) for img, m in samples]
    model = init_weights(build_cracknet(seg_cfg), cfg["model.init_seed"])
    case = lam_case if lam_case is not None else cfg["loss.lambda_case"]
    loss_fn = make_total_loss(weights, lambda_case(case), cfg["loss.reduction"])
    ckpt_path = out_dir / "checkpoint.ckpt"
    result = train_segmenter(model, dataset, loss_fn, train_cfg, checkpoint_path=ckpt_path,
                             resume_from=resume, train_extra={"lambda_case": case})
    write_history_csv(result.history, out_dir / "history.csv")
    if not quiet:
        print(f"trained {result.step} steps; final loss {result.history[-1][1]:.6g}")
        print(f"checkpoint: {ckpt_path}")
    return result


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    cfg = load_run_config(args.config, overrides={
        "data.patch_size": args.patch_size, "data.crack_frac": args.crack_frac, "data.seed": args.seed,
        "data.input_size": args.size,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for root in args.roots:
        records.extend(dataio.build_manifest(root, cfg["data.split_ratios"], cfg["data.seed"]))
    dataio.write_manifest(records, out / "manifest.jsonl")
    by_split = {s: sum(r.split == s for r in records) for s in dataio.SPLITS}
    print(f"manifest: {len(records)} records " + " ".join(f"{k}={v}" for k, v in by_split.items()))

    if args.patches:
        totals = {"crack": 0, "non_crack": 0}
        for rec in records:
            image = dataio.read_image(rec.image_path)
            mask = dataio.read_mask(rec.mask_path)
            if min(mask.shape) < cfg["data.patch_size"]:
                continue
            patches = dataio.crop_patches(image, mask, cfg["data.patch_size"], cfg["data.crack_frac"])
            counts = dataio.write_patches(patches, out / "patches", Path(rec.image_path).stem)
            for k in totals:
                totals[k] += counts[k]
        print(f"patches: crack={totals['crack']} non_crack={totals['non_crack']}")

    if args.augment:
        aug_img, aug_mask = out / "augmented" / "images", out / "augmented" / "masks"
        aug_img.mkdir(parents=True, exist_ok=True)
        aug_mask.mkdir(parents=True, exist_ok=True)
        aug_records = []
        for rec in records:
            image, mask = dataio.load_sample(rec, cfg["data.input_size"])
            stem = Path(rec.image_path).stem
            for k, (img, m) in enumerate(dataio.augment(image, mask)):
                angle, flip = dataio.ROTATIONS[k // 2], k % 2
                name = f"{stem}_rot{angle:03d}_f{flip}"
                cv2.imwrite(str(aug_img / f"{name}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
                cv2.imwrite(str(aug_mask / f"{name}.png"), m * 255)
                aug_records.append(dataio.ImageRecord(str(aug_img / f"{name}.png"),
                                                      str(aug_mask / f"{name}.png"), rec.split, rec.source))
        dataio.write_manifest(aug_records, out / "augmented" / "manifest.jsonl")
        print(f"augmented: {len(aug_records)} samples")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"train.total_iters": args.iters, "train.seed": args.seed}
    if args.task == "detect" and args.iters:
        overrides = {"train.seed": args.seed, "detect.phase_length": max(1, args.iters // 2)}
    cfg = load_run_config(args.config, tiny=args.tiny, overrides=overrides)
    out = Path(args.out)
    if args.task == "seg":
        _train_seg(cfg, args.manifest, out, resume=args.resume)
        return EXIT_OK

    det_cfg = _detect_config(cfg)
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    patches = []
    for rec in dataio.read_manifest(args.manifest, "train"):
        image, mask = dataio.read_image(rec.image_path), dataio.read_mask(rec.mask_path)
        if min(mask.shape) >= cfg["data.patch_size"]:
            patches.extend(dataio.crop_patches(image, mask, cfg["data.patch_size"], cfg["data.crack_frac"]))
    seed = cfg["train.seed"]
    model = build_detector(det_cfg, seed=seed)
    model, history = train_detector(model, patches, det_cfg, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_detect_checkpoint(out / "detector.ckpt", model, len(history), history)
    write_history_csv(history, out / "history.csv")
    print(f"trained detector {len(history)} iterations on {len(patches)} patches")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, overrides={
        "eval.threshold": args.threshold, "eval.gf": True if args.gf else None, "eval.output": args.output,
    })
    magic = ckpt.read_magic(args.checkpoint)
    if magic == ckpt.DETECT_MAGIC:
        model, _ = load_detect_checkpoint(args.checkpoint)
        patches = []
        for rec in dataio.read_manifest(args.manifest, args.split):
            image, mask = dataio.read_image(rec.image_path), dataio.read_mask(rec.mask_path)
            patches.extend(dataio.crop_patches(image, mask, model.config.input_size, cfg["data.crack_frac"]))
        metrics = evaluate_detector(model, patches)
        text = metrics.to_json()
        if args.report_json:
            Path(args.report_json).write_text(text)
        print(text, end="")
        return EXIT_OK

    loaded = load_seg_checkpoint(args.checkpoint)
    _, samples = _load_split(args.manifest, args.split, loaded.model.config.input_size)
    report = _report(loaded.model, samples, cfg, cfg["eval.gf"])
    if args.report_json:
        report.write_json(args.report_json)
    if args.sweep_csv:
        report.write_sweep_csv(args.sweep_csv)
    print(f"A={report.accuracy:.4f} MIOU={report.miou:.4f} DS={report.ds:.4f} IS={report.is_score:.4f} "
          f"BP={report.bp:.4f} BR={report.br:.4f} m*={report.best_threshold:.2f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    threshold = args.threshold if args.threshold is not None else DEFAULTS["eval.threshold"]
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"--threshold must lie in (0, 1), got {threshold}")
    loaded = load_seg_checkpoint(args.checkpoint)
    size = loaded.model.config.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = dataio.read_image(path)
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR) if image.shape[:2] != (size, size) else image
        x, _ = dataio.to_tensors(image, np.zeros(image.shape[:2], np.uint8))
        prob = infer_probabilities(loaded.model, [x], args.output)[0]
        stem = Path(path).stem
        cv2.imwrite(str(out / f"{stem}_prob.png"), np.rint(prob * 255.0).astype(np.uint8))
        cv2.imwrite(str(out / f"{stem}_mask.png"), evalkit.binarize(prob, threshold) * 255)
        print(f"{path}: crack pixels {int((prob >= threshold).sum())}")
    return EXIT_OK


SWEEP_FIELDS = ["case", "lambdas", "accuracy", "miou", "bp", "br", "ds", "is_score", "best_threshold", "final_loss"]


def _parse_cases(text: str) -> list:
    try:
        ids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--cases expects comma-separated ids, got {text!r}") from None
    for i in ids:
        if not 1 <= i <= 7:
            raise UsageError(f"invalid lambda case {i}; cases are 1..7")
    if not ids:
        raise UsageError("--cases is empty")
    return ids


def cmd_lambda_sweep(args) -> int:
    cases = _parse_cases(args.cases)
    cfg = load_run_config(args.config, tiny=args.tiny,
                          overrides={"train.total_iters": args.iters, "train.seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, eval_samples = _load_split(args.manifest, args.eval_split, _seg_config(cfg).input_size)
    rows = []
    for case in cases:
        result = _train_seg(cfg, args.manifest, out / f"case{case}", lam_case=case, quiet=True)
        report = _report(result.model, eval_samples, cfg, cfg["eval.gf"])
        rows.append({"case": case, "lambdas": lambda_case_label(case), "accuracy": report.accuracy,
                     "miou": report.miou, "bp": report.bp, "br": report.br, "ds": report.ds,
                     "is_score": report.is_score, "best_threshold": report.best_threshold,
                     "final_loss": result.history[-1][1]})
        print(f"case {case} {lambda_case_label(case)}: DS={report.ds:.4f} IS={report.is_score:.4f}")
    csv_path = Path(args.out_csv) if args.out_csv else out / "lambda_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    plot_path = Path(args.plot) if args.plot else out / "lambda_sweep.png"
    plot_lambda_sweep(rows, plot_path)
    print(f"wrote {csv_path} and {plot_path}")
    return EXIT_OK


def plot_lambda_sweep(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ["accuracy", "miou", "bp", "br", "ds", "is_score"]
    names = ["A", "MIOU", "BP", "BR", "DS", "IS"]
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(8, 4))
    for j, row in enumerate(rows):
        xs = np.arange(len(metrics)) + j * width
        ax.bar(xs, [row[m] for m in metrics], width, label=f"case {row['case']}")
    ax.set_xticks(np.arange(len(metrics)) + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(fontsize="small", ncol=min(len(rows), 4))
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crackseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a manifest, patch store and augmented set")
    p.add_argument("roots", nargs="+", help="dataset roots with images/ and masks/")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--patch-size", type=int, help=f"detection patch size (default: {_d('data.patch_size')})")
    p.add_argument("--crack-frac", type=float,
                   help=f"patch is crack when its crack fraction exceeds this (default: {_d('data.crack_frac')})")
    p.add_argument("--size", type=int, help=f"segmentation sample size (default: {_d('data.input_size')})")
    p.add_argument("--patches", action="store_true", help="write the crack/non_crack patch store")
    p.add_argument("--augment", action="store_true", help="write the 12x rotated/flipped set (default: off)")
    p.add_argument("--seed", type=int, help=f"split seed (default: {_d('data.seed')})")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the segmenter (seg) or the patch detector (detect)")
    p.add_argument("task", choices=("seg", "detect"))
    p.add_argument("--manifest", required=True, help="manifest from 'prepare'")
    p.add_argument("--out", required=True, help="output directory for checkpoint and history")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--resume", help="segmentation checkpoint to continue from")
    p.add_argument("--tiny", action="store_true", help="desk-scale presets (tiny model, 2000 steps)")
    p.add_argument("--iters", type=int, help=f"total iterations (default: {_d('train.total_iters')}; "
                                             f"detect: {2 * _d('detect.phase_length')})")
    p.add_argument("--seed", type=int, help=f"training seed (default: {_d('train.seed')})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=dataio.SPLITS, help="split to score (default: test)")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--gf", action="store_true", help=f"guided-filter refinement (default: {_d('eval.gf')})")
    p.add_argument("--threshold", type=float, help=f"fixed threshold for A/MIOU (default: {_d('eval.threshold')})")
    p.add_argument("--output", help=f"plane to score, fused or side1..side5 (default: {_d('eval.output')})")
    p.add_argument("--sweep-csv", help="write the 99-row threshold sweep CSV")
    p.add_argument("--report-json", help="write the metric report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write probability and mask images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--threshold", type=float, help=f"mask threshold (default: {_d('eval.threshold')})")
    p.add_argument("--output", default="fused", help="plane to export (default: fused)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("lambda-sweep", help="train and score several side-output weightings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", default="1,2,3,4,5,6,7", help="comma-separated case ids (default: 1,2,3,4,5,6,7)")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--tiny", action="store_true", help="desk-scale presets")
    p.add_argument("--iters", type=int, help=f"steps per case (default: {_d('train.total_iters')})")
    p.add_argument("--seed", type=int, help=f"training seed (default: {_d('train.seed')})")
    p.add_argument("--eval-split", default="val", choices=dataio.SPLITS, help="split to score (default: val)")
    p.add_argument("--out-csv", help="CSV path (default: <out>/lambda_sweep.csv)")
    p.add_argument("--plot", help="PNG path (default: <out>/lambda_sweep.png)")
    p.set_defaults(func=cmd_lambda_sweep)

    p = sub.add_parser("config", help="print the effective configuration")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--tiny", action="store_true")
    p.set_defaults(func=lambda a: print(dump_config(load_run_config(a.config, tiny=a.tiny)), end="") or 0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError, dataio.DatasetLayoutError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
