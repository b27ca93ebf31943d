"""Desk-scale ablations from a pretrained reference checkpoint.

Mask placement (conv3d / conv2d / fc), pattern classification vs box regression,
inference-time mask binarization, grid size K and the pattern-loss weight lambda.
Run scripts/reference_run.py first; its pretrain and FROM checkpoints are reused.
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from fromnet.experiments import DeskConfig, Evaluator, ablation_run, binarization_sweep, build_manifests, to_jsonable
from fromnet.train import model_from_checkpoint

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "ablations.json"


def accuracies(r):
    return {"clean": r["clean"]["accuracy"], "occluded": r["occluded"]["accuracy"],
            "rank1_occluded": r["rank1_occluded"], "heldout_pattern_acc": r["heldout_pattern_acc"]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reference", default="runs/reference", help="output dir of reference_run.py")
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--only", default="variants,binarization,K,lambda")
    ap.add_argument("--freeze", action="store_true", help="write the acceptance fixture")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ref, out = Path(args.reference), Path(args.out)
    pretrained = ref / "runs" / "pretrain_last.pt"
    parts = set(args.only.split(","))
    desk = DeskConfig()
    results = {}

    if "variants" in parts:
        results["variants"] = {k: accuracies(v) for k, v in ablation_run(out / "variants", pretrained, desk).items()}
    if "binarization" in parts:
        evaluator = Evaluator(desk, build_manifests(desk, out / "data"))
        model = model_from_checkpoint(ref / "runs" / "finetune_from_last.pt")
        results["binarization"] = binarization_sweep(model, evaluator)
    # K = 5 and lambda = 1 are the conv3d variant itself; reuse it when it ran
    reference = results.get("variants", {}).get("conv3d")
    if "K" in parts:
        results["K_sweep"] = {"5": reference} if reference else {}
        for K in (3, 4, 5):
            if str(K) in results["K_sweep"]:
                continue
            r = ablation_run(out / f"K{K}", pretrained, replace(desk, K=K), variants={f"K={K}": {}})
            results["K_sweep"][str(K)] = accuracies(r[f"K={K}"])
    if "lambda" in parts:
        lams = (0.5, 2.0) if reference else (0.5, 1.0, 2.0)
        r = ablation_run(out / "lambda", pretrained, desk, variants={f"lambda={lam}": {"loss_lambda": lam} for lam in lams})
        results["lambda_sweep"] = {k.split("=")[1]: accuracies(v) for k, v in r.items()}
        if reference:
            results["lambda_sweep"]["1.0"] = reference

    results = to_jsonable(results)
    print(json.dumps(results, indent=1))
    if args.freeze:
        merged = json.loads(FIXTURE.read_text()) if FIXTURE.exists() else {}
        merged.update(results)
        FIXTURE.write_text(json.dumps(merged, indent=1, sort_keys=True) + "\n")
        print(f"wrote {FIXTURE}")


if __name__ == "__main__":
    main()
