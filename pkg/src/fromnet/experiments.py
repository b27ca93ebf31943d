"""Desk-scale reference experiment and ablation sweeps."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluate import build_pairs, evaluate_pairs, manifest_rank1, occlusion_breakdown, save_pairs
from .synth import Manifest, SynthConfig, build_dataset
from .train import Pool, TrainConfig, pattern_accuracy, train

log = logging.getLogger(__name__)

REGIONS = ("full", "upper", "lower", "left", "right", "eyes", "nose", "mouth")


@dataclass(frozen=True)
class DeskConfig:
    identities: int = 40
    samples_per_identity: int = 50
    height: int = 56
    width: int = 48
    K: int = 5
    eval_identities: int = 40
    eval_samples_per_identity: int = 20
    eval_identity_offset: int = 1000
    eval_scale: float = 2.0
    heldout_samples_per_identity: int = 10
    n_pairs: int = 2000
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="pretrain", batch_size=32, epochs=15, lr=0.1, decay_epochs=(8, 12))
    )
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            stage="finetune", batch_size=30, epochs=15, lr=0.01, decay_epochs=(8, 12), occlusion_refresh=True
        )
    )

    def synth(self, **kw) -> SynthConfig:
        base = SynthConfig(
            identities=self.identities,
            samples_per_identity=self.samples_per_identity,
            height=self.height,
            width=self.width,
            K=self.K,
        )
        return base.replace(**kw)


def build_manifests(desk: DeskConfig, out_dir: Path) -> dict[str, Path]:
    """Write every manifest the reference run needs; returns name -> path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = dict(
        identities=desk.eval_identities,
        samples_per_identity=desk.eval_samples_per_identity,
        identity_offset=desk.eval_identity_offset,
        global_seed=21,
    )
    configs = {
        "train_clean": desk.synth(clean_fraction=1.0, global_seed=11),
        "train_occluded": desk.synth(clean_fraction=0.0, global_seed=12),
        "heldout_occluded": desk.synth(
            clean_fraction=0.0, global_seed=13, samples_per_identity=desk.heldout_samples_per_identity
        ),
        "eval_clean": desk.synth(clean_fraction=1.0, **ev),
        "eval_occluded": desk.synth(clean_fraction=0.0, scale_policy="fixed", scale=desk.eval_scale, **ev),
    }
    for region in REGIONS:
        configs[f"region_{region}"] = desk.synth(clean_fraction=0.0, region=region, **ev)
    paths = {}
    for name, cfg in configs.items():
        path = out_dir / f"{name}.jsonl"
        build_dataset(cfg).save(path)
        paths[name] = path
    ids = [r["identity"] for r in Manifest.load(paths["eval_clean"]).records]
    pairs = build_pairs(ids, desk.n_pairs, seed=7)
    save_pairs(out_dir / "pairs_occluded.jsonl", pairs, paths["eval_occluded"].name,
               recipe="both sides occluded independently, scale fixed")
    save_pairs(out_dir / "pairs_clean.jsonl", pairs, paths["eval_clean"].name, recipe="clean")
    paths["pairs_occluded"] = out_dir / "pairs_occluded.jsonl"
    paths["pairs_clean"] = out_dir / "pairs_clean.jsonl"
    return paths


class Evaluator:
    """Caches rendered evaluation sets across models."""

    def __init__(self, desk: DeskConfig, paths: dict[str, Path]):
        self.desk = desk
        self.manifests = {k: Manifest.load(v) for k, v in paths.items() if not k.startswith("pairs")}
        self.images = {k: m.images() for k, m in self.manifests.items() if k.startswith(("eval", "region"))}
        ids = [r["identity"] for r in self.manifests["eval_clean"].records]
        self.pairs = build_pairs(ids, desk.n_pairs, seed=7)
        self.heldout = Pool.from_manifest(self.manifests["heldout_occluded"])

    def __call__(self, model, regions: bool = False, far_targets=(1e-2, 1e-3)) -> dict:
        out = {}
        for name in ("clean", "occluded"):
            report, _ = evaluate_pairs(model, self.pairs, self.images[f"eval_{name}"], far_targets=far_targets)
            out[name] = report.to_dict()
        out["rank1_occluded"] = manifest_rank1(
            model,
            self.manifests["eval_occluded"],
            self.manifests["eval_clean"],
            self.images["eval_occluded"],
            self.images["eval_clean"],
        )
        out["heldout_pattern_acc"] = pattern_accuracy(model, self.heldout)
        if regions:
            region_manifests = {r: self.manifests[f"region_{r}"] for r in REGIONS}
            region_manifests["clean"] = self.manifests["eval_clean"]
            out["regions"] = occlusion_breakdown(model, region_manifests, self.desk.n_pairs, seed=7)
        return out


def _ft_cfg(desk: DeskConfig, paths: dict[str, Path], run_dir: Path, mode: str, **kw) -> TrainConfig:
    fields = dict(
        clean_manifest=str(paths["train_clean"]),
        occluded_manifest=str(paths["train_occluded"]),
        heldout_manifest=str(paths["heldout_occluded"]),
        out_dir=str(run_dir),
        baseline_mode=mode,
    )
    return desk.finetune.replace(**{**fields, **kw})


def reference_run(out_dir: str | Path, desk: DeskConfig | None = None, variants=("baseline_aug", "baseline_md", "from")) -> dict:
    """Pretrain once, finetune each variant, evaluate all of them."""
    desk = desk or DeskConfig()
    out_dir = Path(out_dir)
    t0 = time.time()
    paths = build_manifests(desk, out_dir / "data")
    evaluator = Evaluator(desk, paths)
    results = {"timings": {}}

    pre_cfg = desk.pretrain.replace(clean_manifest=str(paths["train_clean"]), out_dir=str(out_dir / "runs"))
    t = time.time()
    pre = train(pre_cfg)
    results["timings"]["baseline"] = time.time() - t
    results["baseline"] = evaluator(pre.model, regions=True)
    results["baseline"]["first_step_loss"] = pre.history[0]["total"]
    results["baseline"]["epoch_loss"] = [h["total"] for h in pre.history if h["type"] == "epoch"]
    log.info("baseline: %s", _brief(results["baseline"]))

    for mode in variants:
        t = time.time()
        res = train(_ft_cfg(desk, paths, out_dir / "runs", mode), init=pre.checkpoint_path)
        results["timings"][mode] = time.time() - t
        results[mode] = evaluator(res.model, regions=True)
        results[mode]["epoch_loss"] = [h["total"] for h in res.history if h["type"] == "epoch"]
        log.info("%s: %s", mode, _brief(results[mode]))
    results["timings"]["total"] = time.time() - t0
    (out_dir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def _brief(r: dict) -> str:
    return (
        f"clean={r['clean']['accuracy']:.4f} occluded={r['occluded']['accuracy']:.4f} "
        f"rank1_occ={r['rank1_occluded']:.4f} opp={r['heldout_pattern_acc']:.4f}"
    )


def ablation_run(out_dir: str | Path, pretrained: str | Path, desk: DeskConfig | None = None, variants: dict | None = None) -> dict:
    """Finetune config variants from a shared pretrained checkpoint and evaluate each."""
    desk = desk or DeskConfig()
    out_dir = Path(out_dir)
    paths = build_manifests(desk, out_dir / "data")
    evaluator = Evaluator(desk, paths)
    variants = variants or {
        "conv3d": {},
        "conv2d": {"mask_mode": "conv2d"},
        "fc": {"mask_mode": "fc"},
        "regress": {"loss_pattern_head": "regress"},
    }
    results = {}
    for name, changes in variants.items():
        cfg = _ft_cfg(desk, paths, out_dir / "runs" / name, "from", **changes)
        res = train(cfg, init=pretrained)
        results[name] = evaluator(res.model)
        log.info("%s: %s", name, _brief(results[name]))
    return results


def binarization_sweep(model, evaluator: Evaluator, thresholds=(0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6)) -> dict:
    """Verification accuracy with soft masks and with masks binarized at each threshold."""
    out = {"soft": {k: evaluator(model)[k]["accuracy"] for k in ("clean", "occluded")}}
    try:
        for t in thresholds:
            model.binarize_t = t
            r = evaluator(model)
            out[f"{t:.2f}"] = {k: r[k]["accuracy"] for k in ("clean", "occluded")}
    finally:
        model.binarize_t = None
    return out


def directional_checks(results: dict) -> dict[str, tuple[bool, str]]:
    """The four learning-direction criteria of the reference run."""
    occ = {k: results[k]["occluded"]["accuracy"] for k in ("baseline_aug", "baseline_md", "from")}
    clean_from = results["from"]["clean"]["accuracy"]
    clean_base = results["baseline"]["clean"]["accuracy"]
    opp = results["from"]["heldout_pattern_acc"]
    return {
        "a": (occ["from"] - occ["baseline_aug"] >= 0.05,
              f"FROM {occ['from']:.4f} vs Baseline-Aug {occ['baseline_aug']:.4f} (need +0.05)"),
        "b": (occ["from"] >= occ["baseline_md"], f"FROM {occ['from']:.4f} vs Baseline-MD {occ['baseline_md']:.4f}"),
        "c": (clean_from >= clean_base - 0.02, f"clean FROM {clean_from:.4f} vs Baseline {clean_base:.4f} (at most 0.02 below)"),
        "d": (opp > 0.5, f"held-out pattern accuracy {opp:.4f} (need > 0.5)"),
    }


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
