"""``vcpseg`` command line: train, eval, predict, export-text-weights, synth, convert.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from . import engine
from .backbone import convert_openai_checkpoint
from .config import RunConfig, from_dict, load_config, require
from .data import IMAGE_EXTENSIONS, PreprocessSpec, Sample, load_batch, load_image, scan_dataset, synth_generate
from .errors import CheckpointError, ConfigError, DataError, DivergedError, VCPError
from .heads import ABNORMAL, classification_weights, fuse
from .metrics import ScoredSample, aggregate_runs, build_report, evaluate_product

log = logging.getLogger("vcpseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
CHECKPOINT_NAME = "model.vcp"
LOG_NAME = "train_log.jsonl"

# (images) -> (baseline map (B, 2, h, w), Post-VCP map or None)
ScoreFn = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor | None]]


def run_train(cfg: RunConfig, out_dir: Path) -> Path:
    root = require(cfg.dataset.train_root, "dataset.train_root")
    splits = (cfg.dataset.train_split,) if cfg.dataset.train_split else None
    samples = scan_dataset(root, splits)
    if not samples:
        raise DataError(f"no training images under {root}")
    model = engine.build_model(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_NAME
    products = sorted({s.product for s in samples})
    with open(out_dir / LOG_NAME, "w", encoding="utf-8") as fh:
        def log_fn(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            result = engine.train(model, samples, cfg.train, cfg.loss, seed=cfg.seed, log_fn=log_fn)
        except DivergedError as exc:
            if exc.state is not None:
                engine.load_trainable(model, exc.state)
                meta = engine.checkpoint_meta(model, cfg, train_products=products, diverged_at=exc.step)
                engine.save_checkpoint(model, out_dir / "model.last_good.vcp", meta)
            raise
    means = result.epoch_means()
    meta = engine.checkpoint_meta(
        model,
        cfg,
        train_products=products,
        metrics={"steps": result.steps, "final_epoch_loss": means[-1] if means else None},
    )
    engine.save_checkpoint(model, ckpt, meta)
    return ckpt


def model_from_checkpoint(path) -> tuple[engine.VCPModel, dict]:
    meta = engine.read_meta(path)
    if "config" not in meta:
        raise CheckpointError(str(path), "sidecar lacks the run configuration")
    try:
        cfg = from_dict(RunConfig, meta["config"])
    except ConfigError as exc:
        raise CheckpointError(str(path), str(exc)) from None
    backbone = engine.build_backbone(cfg)
    model = engine.load_checkpoint(path, backbone, seed=cfg.seed).to(cfg.train.device)
    return model, meta


def model_score_fn(model: engine.VCPModel) -> ScoreFn:
    def score(images):
        res = engine.infer(model, images)
        return res.m1, res.m2

    return score


def evaluate(
    score_fn: ScoreFn,
    samples: Sequence[Sample],
    spec: PreprocessSpec,
    alphas: Sequence[float],
    fpr_limit: float = 0.3,
    pro_steps: int | None = None,
    batch_size: int = 8,
):
    """Per-alpha reports over ``samples`` grouped by product."""
    per_alpha: dict[float, dict[str, list[ScoredSample]]] = {a: {} for a in alphas}
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start : start + batch_size])
        images, masks = load_batch(chunk, spec)
        m1, m2 = score_fn(images)
        for a in alphas:
            amap = m1[:, ABNORMAL] if m2 is None else fuse(m1, m2, a)
            for s, sc, mk in zip(chunk, amap.cpu().numpy(), masks.numpy()):
                per_alpha[a].setdefault(s.product, []).append(ScoredSample(sc, mk, s.product))
    reports = {}
    for a, groups in per_alpha.items():
        rows = [evaluate_product(p, groups[p], fpr_limit, pro_steps) for p in sorted(groups)]
        reports[a] = build_report(rows)
    return reports


def _fmt_alpha(a: float) -> str:
    return f"{a:g}"


def cmd_train(args) -> int:
    if args.seeds:
        base = Path(args.out or load_config(args.config).output_dir)
        for seed in args.seeds:
            # one run per seed, each in its own subdirectory
            ckpt = run_train(load_config(args.config, {"seed": seed}), base / f"seed_{seed}")
            print(f"checkpoint written to {ckpt}")
        return EXIT_OK
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out or cfg.output_dir)
    ckpt = run_train(cfg, out_dir)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _eval_one(checkpoint, args, score_fn: ScoreFn | None):
    model, meta = model_from_checkpoint(checkpoint)
    cfg = from_dict(RunConfig, meta["config"])
    alphas = args.alpha if args.alpha else [model.cfg.alpha]
    samples = scan_dataset(args.dataset_root, (args.split,) if args.split else None)
    if not samples:
        raise DataError(f"no evaluation images under {args.dataset_root}")
    shared = sorted({s.product for s in samples} & set(meta.get("train_products", [])))
    if shared:
        msg = f"evaluation products overlap the training products: {', '.join(shared)}"
        print(f"warning: {msg}", file=sys.stderr)
    spec = PreprocessSpec(size=model.image_size)
    return evaluate(
        score_fn or model_score_fn(model), samples, spec, alphas,
        cfg.metrics.pro_fpr_limit, cfg.metrics.pro_steps, batch_size=args.batch_size,
    )


def _write_reports(reports, out_dir: Path) -> None:
    for a, rep in reports.items():
        if len(reports) > 1:
            print(f"alpha = {_fmt_alpha(a)}")
        print(rep.to_text())
        print()
        name = "report.csv" if len(reports) == 1 else f"report_alpha{_fmt_alpha(a)}.csv"
        (out_dir / name).write_text(rep.to_csv(), encoding="utf-8")
    if len(reports) > 1:
        lines = ["alpha,auroc,pro,ap,image_auroc,image_ap"]
        print("alpha sweep (dataset mean)")
        for a, rep in reports.items():
            m = rep.mean
            img = ",".join("" if v is None else f"{100 * v:.1f}" for v in (m.image_auroc, m.image_ap))
            lines.append(f"{_fmt_alpha(a)},{rep.triple(m).replace(' ', '')},{img}")
            print(f"  {_fmt_alpha(a):>5}  {rep.triple(m)}")
        (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(args, score_fn: ScoreFn | None = None) -> int:
    checkpoints = args.checkpoint if isinstance(args.checkpoint, list) else [args.checkpoint]
    runs = [_eval_one(c, args, score_fn) for c in checkpoints]
    out_dir = Path(args.out) if args.out else Path(checkpoints[0]).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(runs) == 1:
        _write_reports(runs[0], out_dir)
        return EXIT_OK
    # several seeds: report mean and spread per alpha
    for a in runs[0]:
        summary = aggregate_runs([r[a] for r in runs])
        print(f"alpha = {_fmt_alpha(a)}")
        print(summary.to_text())
        print()
        name = "seeds.csv" if len(runs[0]) == 1 else f"seeds_alpha{_fmt_alpha(a)}.csv"
        (out_dir / name).write_text(summary.to_csv(), encoding="utf-8")
    return EXIT_OK


def _heatmap_png(amap: np.ndarray) -> Image.Image:
    lo, hi = float(amap.min()), float(amap.max())
    scaled = np.zeros_like(amap) if hi <= lo else (amap - lo) / (hi - lo)
    return Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")


def cmd_predict(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    spec = PreprocessSpec(size=model.image_size)
    image = load_image(args.image, spec)
    res = engine.infer(model, image.unsqueeze(0), args.alpha)
    amap = res.anomaly_map[0].cpu().numpy().astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    np.save(out / f"{stem}_map.npy", amap)
    _heatmap_png(amap).save(out / f"{stem}_heatmap.png")
    info = {"image": str(args.image), "image_score": float(amap.max()), "shape": list(amap.shape)}
    (out / f"{stem}.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(info))
    return EXIT_OK


def text_weights(model: engine.VCPModel, images: torch.Tensor) -> torch.Tensor:
    """Classification weights from the last Post-VCP output (or ``F_t`` without Post-VCP)."""
    res = engine.infer(model, images)
    if res.updated_text:
        return classification_weights(res.updated_text[-1])
    with torch.no_grad():
        vis = model.backbone.encode_image(images)
        text = model.prompt(model.backbone, vis.global_embedding if model.cfg.pre_vcp else None)
    text = text.expand(images.shape[0], *text.shape[-2:])
    return classification_weights(text)


def cmd_export_text_weights(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    spec = PreprocessSpec(size=model.image_size)
    folder = Path(args.images)
    if not folder.is_dir():
        raise DataError(f"{folder} is not a directory")
    paths = sorted(p for p in folder.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise DataError(f"no images under {folder}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for p in paths:
            g = text_weights(model, load_image(str(p), spec).unsqueeze(0))[0].cpu().numpy()
            writer.writerow([str(p), *(repr(float(v)) for v in g)])
    print(f"wrote {len(paths)} rows to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    synth = cfg.synth
    if args.out:
        synth.root = args.out
    samples = synth_generate(synth)
    print(f"wrote {len(samples)} images under {synth.root}")
    return EXIT_OK


def cmd_convert(args) -> int:
    bc = convert_openai_checkpoint(args.src, args.dst)
    print(json.dumps(bc.to_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcpseg", description="Zero-shot anomaly segmentation with visual context prompts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train prompts and heads on seen products")
    p.add_argument("--config", required=True)
    seed = p.add_mutually_exclusive_group()
    seed.add_argument("--seed", type=int)
    seed.add_argument("--seeds", type=int, nargs="+", help="train once per seed into <out>/seed_<s>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset root")
    p.add_argument("--checkpoint", required=True, nargs="+", help="several checkpoints give mean +/- std over runs")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="anomaly map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-text-weights", help="per-image classification weights from the last Post-VCP output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_text_weights)

    p = sub.add_parser("synth", help="write the synthetic defect corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert an OpenAI CLIP .pt checkpoint to a named-tensor archive")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VCPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
