"""Two-stage training: clean pretraining, then occluded end-to-end finetuning."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .losses import MarginHead, MarginSpec, pattern_ce_loss, pattern_reg_loss, total_loss
from .network import FROMNet, NetworkConfig
from .synth import ConfigError, Manifest, coerce_fields, parse_kv, render_dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BASELINE_MODES = ("none", "baseline", "baseline_aug", "baseline_md", "from")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    clean_manifest: str = ""
    occluded_manifest: str = ""
    heldout_manifest: str = ""
    mix_ratio: tuple[int, int] = (2, 1)  # occluded : clean
    batch_size: int = 30
    epochs: int = 15
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (8, 12)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 0.0
    new_module_lr_mult: float = 1.0  # lr multiplier for modules absent from the init checkpoint
    occlusion_refresh: bool = False  # re-render the occluded pool with new occluders every epoch
    seed: int = 0
    baseline_mode: str = "none"
    loss_preset: str = "cosface"
    loss_m1: float = 4.0
    loss_m2: float = 0.5
    loss_m3: float = 0.35
    loss_s: float = 30.0
    loss_lambda: float = 1.0
    loss_pattern_head: str = "classify"
    mask_mode: str = "conv3d"
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: int = 1
    pyramid_channels: int = 64
    embedding_dim: int = 128
    dropout: float = 0.4
    out_dir: str = "runs/default"
    log_every: int = 10
    keep_epoch_checkpoints: bool = False
    deterministic: bool = True

    def __post_init__(self):
        checks = [
            ("stage", self.stage in ("pretrain", "finetune")),
            ("mix_ratio", len(self.mix_ratio) == 2 and min(self.mix_ratio) >= 0 and sum(self.mix_ratio) > 0),
            ("batch_size", self.batch_size >= 2),
            ("epochs", self.epochs >= 1),
            ("lr", self.lr > 0),
            ("decay_epochs", all(a < b for a, b in zip(self.decay_epochs, self.decay_epochs[1:]))
             and all(0 < e < self.epochs for e in self.decay_epochs)),
            ("decay_factor", self.decay_factor >= 1),
            ("new_module_lr_mult", self.new_module_lr_mult > 0),
            ("baseline_mode", self.baseline_mode in BASELINE_MODES),
            ("loss_lambda", self.loss_lambda >= 0),
            ("loss_pattern_head", self.loss_pattern_head in ("classify", "regress")),
            ("loss_preset", self.loss_preset in ("sphereface", "arcface", "cosface")),
            ("loss_s", self.loss_s > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}")

    def margin_spec(self) -> MarginSpec:
        margin = {"sphereface": {"m1": self.loss_m1}, "arcface": {"m2": self.loss_m2}, "cosface": {"m3": self.loss_m3}}
        return MarginSpec.from_preset(self.loss_preset, s=self.loss_s, **margin[self.loss_preset])

    @property
    def effective_mix(self) -> tuple[int, int]:
        return (0, 1) if self.stage == "pretrain" else tuple(self.mix_ratio)

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.baseline_mode == "baseline_md" else self.loss_lambda

    @property
    def effective_mask_mode(self) -> str:
        if self.stage == "pretrain" or self.baseline_mode in ("baseline", "baseline_aug"):
            return "none"
        return self.mask_mode

    def network_config(self, height: int, width: int, channels: int, K: int) -> NetworkConfig:
        return NetworkConfig(
            height=height,
            width=width,
            in_channels=channels,
            stage_channels=tuple(self.stage_channels),
            blocks_per_stage=self.blocks_per_stage,
            pyramid_channels=self.pyramid_channels,
            embedding_dim=self.embedding_dim,
            mask_mode=self.effective_mask_mode,
            pattern_head=self.loss_pattern_head,
            K=K,
            dropout=self.dropout,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("mix_ratio", "decay_epochs", "stage_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


_KEY_ALIASES = {"loss.lambda": "loss_lambda", "lambda": "loss_lambda"}


def load_train_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a flat key=value file. Dotted keys like ``loss.m3`` map to ``loss_m3``."""
    raw = {_KEY_ALIASES.get(k, k.replace(".", "_")): v for k, v in parse_kv(Path(path).read_text()).items()}
    values = coerce_fields(TrainConfig, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def lr_at(epoch: int, initial: float, decay_epochs: tuple[int, ...], factor: float = 10.0) -> float:
    """Step schedule; epochs are 0-based and a decay at epoch e applies from e on."""
    return initial * factor ** -sum(1 for d in decay_epochs if d <= epoch)


# ---------------------------------------------------------------------------
# data


@dataclass
class Pool:
    """In-memory rendered manifest."""

    images: torch.Tensor
    identity: torch.Tensor
    pattern: torch.Tensor
    box: torch.Tensor
    clean: torch.Tensor
    manifest: Manifest

    @classmethod
    def from_manifest(cls, manifest: Manifest, images: np.ndarray | None = None) -> "Pool":
        labels = manifest.labels()
        return cls(
            images=torch.from_numpy(manifest.images() if images is None else images),
            identity=torch.from_numpy(labels["identity"]),
            pattern=torch.from_numpy(labels["pattern"]),
            box=torch.from_numpy(labels["box"]).float(),
            clean=torch.from_numpy(labels["clean"]),
            manifest=manifest,
        )

    def __len__(self) -> int:
        return len(self.identity)


class Batch(NamedTuple):
    images: torch.Tensor
    identity: torch.Tensor
    pattern: torch.Tensor
    box: torch.Tensor
    clean: torch.Tensor


def split_batch(mix_ratio: tuple[int, int], batch_size: int) -> tuple[int, int]:
    a, b = mix_ratio
    if (batch_size * a) % (a + b):
        raise ConfigError(f"mix ratio {a}:{b} cannot split a batch of {batch_size}")
    n_occ = batch_size * a // (a + b)
    return n_occ, batch_size - n_occ


def _gather(occluded: Pool | None, clean: Pool | None, occ_idx, clean_idx) -> Batch:
    parts = []
    if len(occ_idx):
        parts.append((occluded, torch.as_tensor(occ_idx)))
    if len(clean_idx):
        parts.append((clean, torch.as_tensor(clean_idx)))
    fields = zip(*[(p.images[i], p.identity[i], p.pattern[i], p.box[i], p.clean[i]) for p, i in parts])
    return Batch(*(torch.cat(f) for f in fields))


def make_batch(
    occluded: Pool | None,
    clean: Pool | None,
    mix_ratio: tuple[int, int],
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    """Draw one mixed batch: occluded samples first, then clean ones."""
    n_occ, n_clean = split_batch(mix_ratio, batch_size)
    if n_occ and occluded is None or n_clean and clean is None:
        raise ConfigError("mix ratio requests samples from a missing manifest")
    occ_idx = rng.choice(len(occluded), n_occ, replace=False) if n_occ else []
    clean_idx = rng.choice(len(clean), n_clean, replace=False) if n_clean else []
    return _gather(occluded, clean, occ_idx, clean_idx)


def epoch_plan(
    occluded_size: int, clean_size: int, mix_ratio: tuple[int, int], batch_size: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs for every step of one epoch.

    An epoch is one pass over the occluded pool, or over the clean pool when
    the ratio has no occluded part. The other pool cycles through fresh
    permutations.
    """
    n_occ, n_clean = split_batch(mix_ratio, batch_size)
    steps = occluded_size // n_occ if n_occ else clean_size // n_clean
    if steps == 0:
        raise ConfigError(f"pool smaller than one batch of {batch_size}")

    def stream(size: int, per: int) -> np.ndarray:
        if per == 0:
            return np.zeros((steps, 0), dtype=np.int64)
        reps = -(-steps * per // size)
        flat = np.concatenate([rng.permutation(size) for _ in range(reps)])
        return flat[: steps * per].reshape(steps, per)

    occ = stream(occluded_size, n_occ)
    cln = stream(clean_size, n_clean)
    return list(zip(occ, cln))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, **payload) -> None:
    payload = {"format_version": CHECKPOINT_VERSION, "kind": "fromnet-checkpoint", **payload}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("kind") != "fromnet-checkpoint":
        raise CheckpointError(f"{path} is not a fromnet checkpoint")
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('format_version')!r}")
    return ckpt


def model_from_checkpoint(ckpt: dict | str | Path) -> FROMNet:
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    model = FROMNet(NetworkConfig.from_dict(ckpt["network_config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


def _check_compatible(init: NetworkConfig, cfg: NetworkConfig) -> None:
    shared = ("height", "width", "in_channels", "stage_channels", "blocks_per_stage", "embedding_dim")
    diffs = [k for k in shared if getattr(init, k) != getattr(cfg, k)]
    if init.has_mask and cfg.has_mask:
        diffs += [k for k in ("pyramid_channels", "mask_mode", "pattern_head", "K") if getattr(init, k) != getattr(cfg, k)]
    if diffs:
        raise CheckpointError(f"checkpoint incompatible with config: {', '.join(diffs)} differ")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: FROMNet
    head: MarginHead
    checkpoint_path: Path
    history: list[dict]


def _setup_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_pools(cfg: TrainConfig) -> tuple[Pool | None, Pool | None]:
    n_occ, n_clean = split_batch(cfg.effective_mix, cfg.batch_size)
    occluded = clean = None
    if n_clean:
        if not cfg.clean_manifest:
            raise ConfigError("clean_manifest is required by this mix ratio")
        clean = Pool.from_manifest(_read_manifest(cfg.clean_manifest))
        if not bool(clean.clean.all()):
            raise ConfigError(f"{cfg.clean_manifest} contains occluded records")
    if n_occ:
        if not cfg.occluded_manifest:
            raise ConfigError("occluded_manifest is required by this mix ratio")
        occluded = Pool.from_manifest(_read_manifest(cfg.occluded_manifest))
    if occluded is not None and clean is not None:
        a, b = occluded.manifest.config, clean.manifest.config
        for key in ("identities", "identity_offset", "height", "width", "channels", "K"):
            if getattr(a, key) != getattr(b, key):
                raise ConfigError(f"clean and occluded manifests disagree on {key}")
    return occluded, clean


def _read_manifest(path: str) -> Manifest:
    if not Path(path).exists():
        raise ConfigError(f"manifest not found: {path}")
    return Manifest.load(path)


def refreshed_pool(base: Pool, epoch: int) -> Pool:
    """The occluded pool for ``epoch``: the manifest itself at epoch 0, then the
    same identities and sample counts re-rendered under an epoch-derived seed."""
    if epoch == 0:
        return base
    seed = int(np.random.SeedSequence([base.manifest.config.global_seed, epoch]).generate_state(1)[0])
    return Pool.from_manifest(*render_dataset(base.manifest.config.replace(global_seed=seed)))


def pattern_accuracy(model: FROMNet, pool: Pool, batch_size: int = 256) -> float:
    """Held-out argmax accuracy of the pattern classifier."""
    if not model.cfg.has_mask or model.cfg.pattern_head != "classify":
        return float("nan")
    was_training = model.training
    model.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(pool), batch_size):
            out = model(pool.images[i : i + batch_size])
            hits += int((out.pattern.argmax(1) == pool.pattern[i : i + batch_size]).sum())
    model.train(was_training)
    return hits / len(pool)


def step_losses(model: FROMNet, head: MarginHead, batch: Batch, lam: float) -> dict[str, torch.Tensor]:
    out = model(batch.images)
    l_margin, cos = head(out.embedding, batch.identity)
    losses = {"margin": l_margin}
    if out.pattern is not None:
        if model.cfg.pattern_head == "classify":
            l_pred = pattern_ce_loss(out.pattern, batch.pattern)
            losses["pattern_acc"] = (out.pattern.argmax(1) == batch.pattern).float().mean().detach()
        else:
            l_pred = pattern_reg_loss(out.pattern, batch.box.to(out.pattern.dtype))
        losses["pred"] = l_pred
        losses["total"] = total_loss(l_margin, l_pred, lam)
    else:
        losses["total"] = l_margin
    losses["train_acc"] = (cos.argmax(1) == batch.identity).float().mean().detach()
    return losses


def _run_name(cfg: TrainConfig) -> str:
    return cfg.stage if cfg.baseline_mode == "none" else f"{cfg.stage}_{cfg.baseline_mode}"


def train(cfg: TrainConfig, init: str | Path | dict | None = None, resume: str | Path | None = None) -> TrainResult:
    """Run one training stage.

    ``init`` seeds the backbone, embedding head and class weights from a
    pretrained checkpoint. ``resume`` continues an interrupted run of the same
    config from its last saved epoch.
    """
    if cfg.stage == "finetune" and cfg.baseline_mode == "baseline":
        raise ConfigError("baseline_mode=baseline has no finetune stage")
    if cfg.stage == "finetune" and init is None and resume is None:
        raise ConfigError("finetune needs a pretrained checkpoint")
    _setup_determinism(cfg)
    occluded, clean = _load_pools(cfg)
    base_occluded = occluded
    ref = (occluded or clean).manifest.config
    net_cfg = cfg.network_config(ref.height, ref.width, ref.channels, ref.K)
    lam = cfg.effective_lambda

    torch.manual_seed(cfg.seed)
    model = FROMNet(net_cfg)
    head = MarginHead(net_cfg.embedding_dim, ref.identities, cfg.margin_spec())

    start_epoch = 0
    ckpt = None
    fresh_modules: list[str] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if TrainConfig.from_dict(ckpt["train_config"]) != cfg:
            raise CheckpointError("resume checkpoint was written by a different config")
        model.load_state_dict(ckpt["model"])
        head.load_state_dict(ckpt["margin_head"])
        start_epoch = ckpt["epoch"] + 1
        fresh_modules = list(ckpt.get("fresh_modules", []))
    elif init is not None:
        src = init if isinstance(init, dict) else load_checkpoint(init)
        _check_compatible(NetworkConfig.from_dict(src["network_config"]), net_cfg)
        trunk = {k: v for k, v in src["model"].items() if k.startswith(("backbone.", "embed."))}
        if not src["network_config"]["mask_mode"] == "none" and net_cfg.has_mask:
            trunk = src["model"]
        missing, unexpected = model.load_state_dict(trunk, strict=False)
        if unexpected or any(k.startswith(("backbone.", "embed.")) for k in missing):
            raise CheckpointError("pretrained checkpoint does not cover the backbone and embedding head")
        fresh_modules = sorted({k.split(".")[0] for k in missing})
        if src["margin_head"]["weight"].shape != head.weight.shape:
            raise CheckpointError("pretrained class weights do not match the identity count")
        head.load_state_dict(src["margin_head"])

    fresh = set(fresh_modules)
    groups = {"base": [], "fresh": []}
    for name, group in model.module_groups().items():
        if name == "opp" and lam == 0:
            continue
        groups["fresh" if name in fresh else "base"].extend(group)
    groups["base"] += list(head.parameters())
    params = groups["base"] + groups["fresh"]
    opt = torch.optim.SGD(
        [{"params": groups["base"], "lr_mult": 1.0}, {"params": groups["fresh"], "lr_mult": cfg.new_module_lr_mult}],
        lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    if ckpt is not None:
        opt.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["rng"]["torch"])

    heldout = Pool.from_manifest(_read_manifest(cfg.heldout_manifest)) if cfg.heldout_manifest else None
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"{_run_name(cfg)}.log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    history: list[dict] = []
    mix = cfg.effective_mix
    ckpt_path = out_dir / f"{_run_name(cfg)}_last.pt"

    with log_path.open("a", encoding="utf-8") as log_file:

        def emit(entry: dict) -> None:
            history.append(entry)
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()

        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg.lr, cfg.decay_epochs, cfg.decay_factor)
            for group in opt.param_groups:
                group["lr"] = lr * group["lr_mult"]
            rng = np.random.default_rng([cfg.seed, epoch])
            if cfg.occlusion_refresh and occluded is not None:
                occluded = refreshed_pool(base_occluded, epoch)
            plan = epoch_plan(len(occluded) if occluded else 0, len(clean) if clean else 0, mix, cfg.batch_size, rng)
            model.train()
            head.train()
            sums: dict[str, float] = {}
            for step, (occ_idx, clean_idx) in enumerate(plan):
                batch = _gather(occluded, clean, occ_idx, clean_idx)
                losses = step_losses(model, head, batch, lam)
                opt.zero_grad(set_to_none=True)
                losses["total"].backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                values = {k: float(v.detach()) for k, v in losses.items()}
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v
                if step % cfg.log_every == 0:
                    emit({"type": "step", "epoch": epoch, "step": step, "lr": lr, **values})
            summary = {k: v / len(plan) for k, v in sums.items()}
            if heldout is not None:
                summary["heldout_pattern_acc"] = pattern_accuracy(model, heldout)
            emit({"type": "epoch", "epoch": epoch, "lr": lr, "steps": len(plan), **summary})
            log.info("%s epoch %d: %s", _run_name(cfg), epoch, summary)
            save_checkpoint(
                ckpt_path,
                stage=cfg.stage,
                epoch=epoch,
                network_config=net_cfg.to_dict(),
                train_config=cfg.to_dict(),
                model=model.state_dict(),
                margin_head=head.state_dict(),
                optimizer=opt.state_dict(),
                rng={"torch": torch.get_rng_state()},
                fresh_modules=fresh_modules,
            )
            if cfg.keep_epoch_checkpoints:
                (out_dir / f"{_run_name(cfg)}_epoch{epoch:03d}.pt").write_bytes(ckpt_path.read_bytes())
    model.eval()
    return TrainResult(model, head, ckpt_path, history)


def pretrain_backbone(cfg: TrainConfig) -> TrainResult:
    return train(cfg.replace(stage="pretrain"))


def finetune_from(cfg: TrainConfig, pretrained: str | Path | dict) -> TrainResult:
    return train(cfg.replace(stage="finetune"), init=pretrained)
