"""Verification, TAR@FAR and rank-1 identification on learned embeddings."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .synth import Manifest

PAIRS_VERSION = 1


class ProtocolError(ValueError):
    pass


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding")
    return x / norms


def pair_scores(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(_normalize_rows(emb_a) * _normalize_rows(emb_b), axis=1), -1.0, 1.0)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Counts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.tn + self.fp + self.fn)

    @property
    def tar(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def far(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else float("nan")


def confusion(scores: np.ndarray, same: np.ndarray, threshold: float) -> Counts:
    """Pairs with score >= threshold are accepted as the same identity."""
    scores, same = np.asarray(scores), np.asarray(same, dtype=bool)
    accept = scores >= threshold
    return Counts(
        tp=int(np.sum(accept & same)),
        tn=int(np.sum(~accept & ~same)),
        fp=int(np.sum(accept & ~same)),
        fn=int(np.sum(~accept & same)),
    )


def best_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Threshold maximizing accuracy; candidates sit midway between distinct scores."""
    scores, same = np.asarray(scores, dtype=np.float64), np.asarray(same, dtype=bool)
    u = np.unique(scores)
    candidates = np.concatenate([[u[0] - 1e-6], (u[:-1] + u[1:]) / 2, [u[-1] + 1e-6]])
    pos, neg = np.sort(scores[same]), np.sort(scores[~same])
    tp = len(pos) - np.searchsorted(pos, candidates, side="left")
    tn = np.searchsorted(neg, candidates, side="left")
    return float(candidates[int(np.argmax(tp + tn))])


@dataclass
class VerificationResult:
    accuracy: float
    threshold: float
    dev_accuracy: float
    counts: Counts
    n_dev: int
    n_test: int


def verification_accuracy(scores: Sequence[float], same: Sequence[bool]) -> VerificationResult:
    """Pick the threshold on even-indexed pairs, report accuracy on odd-indexed ones."""
    scores, same = np.asarray(scores, dtype=np.float64), np.asarray(same, dtype=bool)
    if len(scores) < 2:
        raise ProtocolError("verification needs at least 2 pairs")
    if same.all() or not same.any():
        raise ProtocolError("verification needs both positive and negative pairs")
    dev, test = slice(0, None, 2), slice(1, None, 2)
    thr = best_threshold(scores[dev], same[dev])
    counts = confusion(scores[test], same[test], thr)
    return VerificationResult(
        accuracy=counts.accuracy,
        threshold=thr,
        dev_accuracy=confusion(scores[dev], same[dev], thr).accuracy,
        counts=counts,
        n_dev=len(scores[dev]),
        n_test=len(scores[test]),
    )


@dataclass
class TarResult:
    far_target: float
    tar: float
    far: float
    threshold: float
    counts: Counts


def tar_at_far(scores: Sequence[float], same: Sequence[bool], far_target: float) -> TarResult:
    """TAR at the most permissive threshold whose FAR does not exceed ``far_target``."""
    scores, same = np.asarray(scores, dtype=np.float64), np.asarray(same, dtype=bool)
    if not 0 < far_target <= 1:
        raise ValueError(f"far_target must lie in (0, 1], got {far_target}")
    neg = np.sort(scores[~same])[::-1]
    if not same.any():
        raise ProtocolError("TAR needs at least one positive pair")
    need = math.ceil(1.0 / far_target - 1e-9)
    if len(neg) < need:
        raise ProtocolError(f"FAR {far_target:g} needs at least {need} negative pairs, got {len(neg)}")
    allowed = int(math.floor(far_target * len(neg) + 1e-9))
    if allowed >= len(neg):
        thr = -1.0
    else:
        # reject the (allowed+1)-th highest negative and everything tied with it
        thr = float(np.nextafter(neg[allowed], np.inf))
    counts = confusion(scores, same, thr)
    return TarResult(far_target, counts.tar, counts.far, thr, counts)


def rank1_identification(
    gallery: np.ndarray, gallery_ids: Sequence[int], probes: np.ndarray, probe_ids: Sequence[int]
) -> float:
    gallery_ids, probe_ids = np.asarray(gallery_ids), np.asarray(probe_ids)
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ProtocolError(f"probe identities missing from gallery: {sorted(missing)[:10]}")
    sims = _normalize_rows(probes) @ _normalize_rows(gallery).T
    return float(np.mean(gallery_ids[np.argmax(sims, axis=1)] == probe_ids))


# ---------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class VerificationPair:
    sample_a: int
    sample_b: int
    same_identity: bool


def build_pairs(identities: Sequence[int], n_pairs: int, seed: int = 0) -> list[VerificationPair]:
    """Balanced pairs over record positions in a pos, pos, neg, neg cycle.

    The cycle keeps both the even (dev) and odd (test) halves balanced.
    """
    ids = np.asarray(identities)
    rng = np.random.default_rng([seed, len(ids), n_pairs])
    by_id = {i: np.flatnonzero(ids == i) for i in np.unique(ids)}
    multi = [i for i, idx in by_id.items() if len(idx) >= 2]
    if not multi or len(by_id) < 2:
        raise ProtocolError("pairs need an identity with two samples and at least two identities")
    pairs = []
    for k in range(n_pairs):
        if k % 4 < 2:
            a, b = rng.choice(by_id[multi[rng.integers(len(multi))]], 2, replace=False)
            pairs.append(VerificationPair(int(a), int(b), True))
        else:
            while True:
                a, b = rng.integers(len(ids), size=2)
                if ids[a] != ids[b]:
                    break
            pairs.append(VerificationPair(int(a), int(b), False))
    return pairs


def save_pairs(path: str | Path, pairs: Sequence[VerificationPair], manifest_a: str, manifest_b: str | None = None, recipe: str = "") -> None:
    header = {
        "type": "header",
        "format_version": PAIRS_VERSION,
        "manifest_a": str(manifest_a),
        "manifest_b": str(manifest_b or manifest_a),
        "recipe": recipe,
    }
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(dataclasses.asdict(p), sort_keys=True) for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path: str | Path) -> tuple[dict, list[VerificationPair]]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    header = json.loads(lines[0]) if lines else {}
    if header.get("type") != "header" or header.get("format_version") != PAIRS_VERSION:
        raise ProtocolError(f"{path}: missing or unsupported pairs header")
    base = Path(path).parent
    for key in ("manifest_a", "manifest_b"):
        p = Path(header[key])
        if not p.is_absolute() and not p.exists():
            header[key] = str(base / p)
    return header, [VerificationPair(**json.loads(l)) for l in lines[1:]]


# ---------------------------------------------------------------------------
# model-level evaluation


def extract_embeddings(model, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    images = torch.as_tensor(images)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(model(images[i : i + batch_size]).embedding.double().numpy())
    return np.concatenate(chunks)


@dataclass
class EvalReport:
    accuracy: float
    threshold: float
    dev_accuracy: float
    counts: dict
    tar_at_far: dict
    rank1: float | None = None
    per_occlusion: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_scores(scores, same, far_targets=(1e-2, 1e-3)) -> tuple[EvalReport, dict]:
    ver = verification_accuracy(scores, same)
    tars, notes = {}, []
    for far in far_targets:
        try:
            r = tar_at_far(scores, same, far)
            tars[f"{far:g}"] = {"tar": r.tar, "far": r.far, "threshold": r.threshold}
        except ProtocolError as exc:
            tars[f"{far:g}"] = None
            notes.append(str(exc))
    report = EvalReport(
        accuracy=ver.accuracy,
        threshold=ver.threshold,
        dev_accuracy=ver.dev_accuracy,
        counts=dataclasses.asdict(ver.counts),
        tar_at_far=tars,
        notes=notes,
    )
    return report, {"scores": np.asarray(scores), "same": np.asarray(same, dtype=bool)}


def evaluate_pairs(model, pairs: Sequence[VerificationPair], images_a, images_b=None, far_targets=(1e-2, 1e-3)):
    emb_a = extract_embeddings(model, images_a)
    emb_b = emb_a if images_b is None else extract_embeddings(model, images_b)
    ia = np.array([p.sample_a for p in pairs])
    ib = np.array([p.sample_b for p in pairs])
    scores = pair_scores(emb_a[ia], emb_b[ib])
    same = np.array([p.same_identity for p in pairs])
    return report_from_scores(scores, same, far_targets)


def manifest_rank1(model, probe: Manifest, gallery: Manifest, probe_images=None, gallery_images=None) -> float:
    """Gallery holds the first record of each identity; probes are all other records."""
    g_ids = np.array([r["identity"] for r in gallery.records])
    first = {}
    for pos, i in enumerate(g_ids):
        first.setdefault(int(i), pos)
    g_pos = np.array(sorted(first.values()))
    g_img = gallery.images(g_pos) if gallery_images is None else np.asarray(gallery_images)[g_pos]
    p_ids = np.array([r["identity"] for r in probe.records])
    p_pos = np.array([i for i in range(len(p_ids)) if i not in set(g_pos.tolist())])
    p_img = probe.images(p_pos) if probe_images is None else np.asarray(probe_images)[p_pos]
    return rank1_identification(
        extract_embeddings(model, g_img), g_ids[g_pos], extract_embeddings(model, p_img), p_ids[p_pos]
    )


def occlusion_breakdown(model, region_manifests: dict[str, Manifest], n_pairs: int = 2000, seed: int = 0) -> dict:
    """Verification accuracy per occlusion region plus their mean under ``avg``."""
    table = {}
    for name, manifest in region_manifests.items():
        ids = [r["identity"] for r in manifest.records]
        pairs = build_pairs(ids, n_pairs, seed)
        report, _ = evaluate_pairs(model, pairs, manifest.images())
        table[name] = report.accuracy
    table["avg"] = float(np.mean(list(table.values()))) if table else float("nan")
    return table


def plot_report(scores, same, report: EvalReport, out_dir: str | Path, title: str = "") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores, same = np.asarray(scores), np.asarray(same, dtype=bool)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(-1, 1, 61)
    ax.hist(scores[same], bins=bins, alpha=0.6, label="same identity")
    ax.hist(scores[~same], bins=bins, alpha=0.6, label="different identity")
    ax.axvline(report.threshold, color="k", ls="--", lw=1, label=f"threshold {report.threshold:.3f}")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pairs")
    ax.set_title(title or f"accuracy {report.accuracy:.4f}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    paths.append(out_dir / "score_distribution.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    entries = {k: v["tar"] for k, v in report.tar_at_far.items() if v is not None}
    if entries:
        fig, ax = plt.subplots(figsize=(4, 3.5))
        ax.bar([f"FAR={k}" for k in entries], list(entries.values()))
        ax.set_ylim(0, 1)
        ax.set_ylabel("TAR")
        fig.tight_layout()
        paths.append(out_dir / "tar_at_far.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    return paths
