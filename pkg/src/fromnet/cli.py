"""Command line entry points."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def cmd_patterns(args) -> int:
    from .patterns import enumerate_patterns, size_matrix

    book = enumerate_patterns(args.k)
    print(f"K={args.k}: {len(book)} patterns (1 clean + {len(book) - 1} rectangles)")
    print("size matrix (rows = block height, cols = block width):")
    for row in size_matrix(args.k):
        print("  " + " ".join(f"{v:3d}" for v in row))
    if args.dump:
        payload = {"K": args.k, "count": len(book), "patterns": [dict(index=i, **p.to_dict()) for i, p in enumerate(book)]}
        Path(args.dump).write_text(json.dumps(payload, indent=1) + "\n")
        print(f"wrote {args.dump}")
    return 0


def cmd_synth(args) -> int:
    from .synth import build_dataset, export_images, load_synth_config

    cfg = load_synth_config(args.config)
    manifest = build_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    n_clean = sum(r["clean"] for r in manifest.records)
    print(f"wrote {len(manifest)} records ({n_clean} clean) to {out}")
    if args.export_images:
        paths = export_images(manifest, args.export_images)
        print(f"exported {len(paths)} images to {args.export_images}")
    return 0


def _train_overrides(args) -> dict:
    return {"out_dir": args.out_dir, "seed": args.seed, "epochs": args.epochs}


def cmd_pretrain(args) -> int:
    from .train import load_train_config, train

    cfg = load_train_config(args.config, **_train_overrides(args)).replace(stage="pretrain")
    res = train(cfg, resume=args.resume)
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    from .train import load_train_config, train

    cfg = load_train_config(args.config, **_train_overrides(args)).replace(stage="finetune")
    res = train(cfg, init=None if args.resume else args.init, resume=args.resume)
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def load_image(path: str | Path, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Read an image file as a (C, H, W) float32 array in [-1, 1]."""
    from PIL import Image

    img = Image.open(path).convert("RGB" if channels == 3 else "L")
    if img.size != (width, height):
        img = img.resize((width, height), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.transpose(2, 0, 1).copy()


def cmd_predict_pattern(args) -> int:
    import torch

    from .patterns import enumerate_patterns, format_block_mask, pattern_to_block_mask
    from .train import model_from_checkpoint

    model = model_from_checkpoint(args.ckpt)
    cfg = model.cfg
    if not cfg.has_mask:
        print("checkpoint has no occlusion pattern predictor", file=sys.stderr)
        return 2
    x = torch.from_numpy(load_image(args.image, cfg.height, cfg.width, cfg.in_channels))[None]
    with torch.no_grad():
        out = model(x).pattern[0]
    if cfg.pattern_head == "regress":
        box = out.clamp(0, 1).tolist()
        print("predicted box (x0, y0, x1, y1, normalized): " + ", ".join(f"{v:.3f}" for v in box))
        return 0
    book = enumerate_patterns(cfg.K)
    idx = int(out.argmax())
    p = book[idx]
    probs = torch.softmax(out, 0)
    desc = "clean" if p.is_clean else f"rows {p.row}..{p.row + p.m - 1}, cols {p.col}..{p.col + p.n - 1}"
    print(f"pattern {idx} ({desc}), p={float(probs[idx]):.3f}")
    print(format_block_mask(pattern_to_block_mask(p, cfg.K)))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_pairs, load_pairs, plot_report
    from .synth import Manifest
    from .train import model_from_checkpoint

    model = model_from_checkpoint(args.ckpt)
    header, pairs = load_pairs(args.pairs)
    ma = Manifest.load(header["manifest_a"])
    mb = ma if header["manifest_b"] == header["manifest_a"] else Manifest.load(header["manifest_b"])
    far = tuple(float(v) for v in args.far.split(",") if v.strip())
    imgs_a = ma.images()
    imgs_b = None if mb is ma else mb.images()
    if args.binarize is not None:
        model.binarize_t = args.binarize
    report, raw = evaluate_pairs(model, pairs, imgs_a, imgs_b, far_targets=far)
    report.config = {"ckpt": str(args.ckpt), "pairs": str(args.pairs), "recipe": header.get("recipe", ""),
                     "binarize": args.binarize, "network": model.cfg.to_dict()}
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.plot:
        for p in plot_report(raw["scores"], raw["same"], report, args.plot):
            print(f"plot: {p}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fromnet", description="Occlusion-robust face embeddings with feature masks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patterns", help="enumerate the occlusion pattern codebook")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--dump", help="write the codebook as JSON")
    p.set_defaults(func=cmd_patterns)

    p = sub.add_parser("synth", help="build a synthetic occluded dataset manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--export-images")
    p.set_defaults(func=cmd_synth)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", required=True)
        if name == "finetune":
            p.add_argument("--init", help="pretrained checkpoint")
        p.add_argument("--resume", help="continue from a checkpoint of the same config")
        p.add_argument("--out-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("predict-pattern", help="predict the occlusion pattern of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict_pattern)

    p = sub.add_parser("eval", help="verification accuracy and TAR@FAR on a pairs file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--far", default="1e-2,1e-3")
    p.add_argument("--plot")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--binarize", type=float, help="binarize masks at this threshold")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    from .synth import ConfigError
    from .train import CheckpointError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    if args.command == "finetune" and not (args.init or args.resume):
        print("error: finetune needs --init (or --resume)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
