"""Pyramid backbone, mask decoder, occlusion pattern predictor and embedding head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .patterns import pattern_count

MASK_MODES = ("conv3d", "conv2d", "fc", "none")
PATTERN_HEADS = ("classify", "regress")


@dataclass(frozen=True)
class NetworkConfig:
    height: int = 112
    width: int = 96
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (32, 64, 128)  # C3 (/4), C2 (/8), X1 (/16)
    blocks_per_stage: int = 1
    pyramid_channels: int = 64
    embedding_dim: int = 128
    mask_mode: str = "conv3d"  # "none" drops the decoder and predictor entirely
    pattern_head: str = "classify"
    K: int = 5
    dropout: float = 0.4

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.pattern_head not in PATTERN_HEADS:
            raise ValueError(f"pattern_head must be one of {PATTERN_HEADS}, got {self.pattern_head!r}")
        if self.height < 16 or self.width < 16:
            raise ValueError("image dims must be at least 16x16")
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels needs three entries")

    @property
    def x1_size(self) -> tuple[int, int]:
        return _down(self.height, 4), _down(self.width, 4)

    @property
    def x2_size(self) -> tuple[int, int]:
        return _down(self.height, 3), _down(self.width, 3)

    @property
    def x3_size(self) -> tuple[int, int]:
        return _down(self.height, 2), _down(self.width, 2)

    @property
    def num_patterns(self) -> int:
        return pattern_count(self.K)

    @property
    def pattern_dim(self) -> int:
        return self.num_patterns if self.pattern_head == "classify" else 4

    @property
    def has_mask(self) -> bool:
        return self.mask_mode != "none"

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def _down(n: int, times: int) -> int:
    # output size of ``times`` stride-2 3x3 convs with padding 1
    for _ in range(times):
        n = (n + 1) // 2
    return n


class ForwardOutput(NamedTuple):
    embedding: torch.Tensor
    pattern: torch.Tensor | None
    mask: torch.Tensor | None


def conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.PReLU(cout))


class IRBlock(nn.Module):
    """Improved residual unit: BN-Conv-BN-PReLU-Conv-BN with a projected shortcut."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.PReLU(cout),
            nn.Conv2d(cout, cout, 3, stride, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        if stride == 1 and cin == cout:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


def _stage(cin: int, cout: int, blocks: int) -> nn.Sequential:
    return nn.Sequential(IRBlock(cin, cout, 2), *[IRBlock(cout, cout, 1) for _ in range(blocks - 1)])


class Backbone(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c3, c2, c1 = cfg.stage_channels
        self.cfg = cfg
        self.stem = conv_bn(cfg.in_channels, c3 // 2, stride=2)
        self.stage3 = _stage(c3 // 2, c3, cfg.blocks_per_stage)
        self.stage2 = _stage(c3, c2, cfg.blocks_per_stage)
        self.stage1 = _stage(c2, c1, cfg.blocks_per_stage)

    def forward(self, images):
        expected = (self.cfg.in_channels, self.cfg.height, self.cfg.width)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected images of shape (N, {', '.join(map(str, expected))}), got {tuple(images.shape)}")
        c3 = self.stage3(self.stem(images))
        c2 = self.stage2(c3)
        x1 = self.stage1(c2)
        return x1, c2, c3


def upsample_to(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Nearest x2 upsample, cropped to ``like`` when the finer map has odd size."""
    up = F.interpolate(x, scale_factor=2, mode="nearest")
    h, w = like.shape[-2:]
    if up.shape[-2] < h or up.shape[-1] < w:
        raise RuntimeError(f"upsampled {tuple(up.shape[-2:])} cannot cover lateral {(h, w)}")
    return up[..., :h, :w]


class PyramidFuse(nn.Module):
    """Top-down fusion: X2 from X1 and C2, then X3 from X2 and C3."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c3, c2, c1 = cfg.stage_channels
        p = cfg.pyramid_channels
        self.top_x1 = nn.Conv2d(c1, p, 1)
        self.lat_c2 = nn.Conv2d(c2, p, 1)
        self.fuse2 = nn.Conv2d(p, p, 3, padding=1)
        self.top_x2 = nn.Conv2d(p, p, 1)
        self.lat_c3 = nn.Conv2d(c3, p, 1)
        self.fuse3 = nn.Conv2d(p, p, 3, padding=1)

    def forward(self, x1, c2, c3):
        lat2 = self.lat_c2(c2)
        x2 = self.fuse2(upsample_to(self.top_x1(x1), lat2) + lat2)
        lat3 = self.lat_c3(c3)
        x3 = self.fuse3(upsample_to(self.top_x2(x2), lat3) + lat3)
        return x2, x3


class MaskDecoder(nn.Module):
    """Conv-PReLU-BN-Conv-Sigmoid; both convs stride 2 so X3 lands on X1's grid.

    ``fc`` mode pools the second conv's output and maps it to an
    embedding-sized mask instead.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        p = cfg.pyramid_channels
        self.mode = cfg.mask_mode
        out = {"conv3d": cfg.stage_channels[2], "conv2d": 1, "fc": p}[cfg.mask_mode]
        self.conv1 = nn.Conv2d(p, p, 3, 2, 1)
        self.act = nn.PReLU(p)
        self.bn = nn.BatchNorm2d(p)
        self.conv2 = nn.Conv2d(p, out, 3, 2, 1)
        self.fc = nn.Linear(p, cfg.embedding_dim) if self.mode == "fc" else None

    def forward(self, x3):
        z = self.conv2(self.bn(self.act(self.conv1(x3))))
        if self.fc is not None:
            z = self.fc(z.mean(dim=(2, 3)))
        return torch.sigmoid(z)


class OcclusionPatternPredictor(nn.Module):
    """BN-Dropout-FC-BN over the flattened mask."""

    def __init__(self, mask_numel: int, out_dim: int, dropout: float):
        super().__init__()
        self.bn_in = nn.BatchNorm1d(mask_numel)
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(mask_numel, out_dim)
        self.bn_out = nn.BatchNorm1d(out_dim)

    def forward(self, mask):
        return self.bn_out(self.fc(self.drop(self.bn_in(mask.flatten(1)))))


class EmbeddingHead(nn.Module):
    """Flatten-BN-Dropout-FC-BN."""

    def __init__(self, in_numel: int, dim: int, dropout: float):
        super().__init__()
        self.bn_in = nn.BatchNorm1d(in_numel)
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(in_numel, dim)
        self.bn_out = nn.BatchNorm1d(dim)

    def forward(self, x):
        return self.bn_out(self.fc(self.drop(self.bn_in(x.flatten(1)))))


def binarize_mask(mask: torch.Tensor, t: float) -> torch.Tensor:
    if not 0.0 < t < 1.0:
        raise ValueError(f"binarization threshold must lie in (0, 1), got {t}")
    return (mask >= t).to(mask.dtype)


def apply_mask(features: torch.Tensor, mask: torch.Tensor, mode: str) -> torch.Tensor:
    """Element-wise product. conv2d masks carry one channel and broadcast over C."""
    if mode == "conv3d":
        ok = mask.shape == features.shape
    elif mode == "conv2d":
        ok = mask.ndim == 4 and mask.shape[1] == 1 and mask.shape[2:] == features.shape[2:] and mask.shape[0] == features.shape[0]
    elif mode == "fc":
        ok = mask.ndim == 2 and mask.shape == features.shape
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    if not ok:
        raise ValueError(f"mask {tuple(mask.shape)} does not fit features {tuple(features.shape)} in {mode} mode")
    return features * mask


class FROMNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        h1, w1 = cfg.x1_size
        c1 = cfg.stage_channels[2]
        self.embed = EmbeddingHead(c1 * h1 * w1, cfg.embedding_dim, cfg.dropout)
        if cfg.has_mask:
            self.pyramid = PyramidFuse(cfg)
            self.decoder = MaskDecoder(cfg)
            mask_numel = {"conv3d": c1 * h1 * w1, "conv2d": h1 * w1, "fc": cfg.embedding_dim}[cfg.mask_mode]
            self.opp = OcclusionPatternPredictor(mask_numel, cfg.pattern_dim, cfg.dropout)
        # inference-time knobs
        self.binarize_t: float | None = None
        self.forced_mask: float | None = None

    def decode_mask(self, x1, c2, c3):
        _, x3 = self.pyramid(x1, c2, c3)
        mask = self.decoder(x3)
        if self.forced_mask is not None:
            mask = torch.full_like(mask, self.forced_mask)
        return mask

    def forward(self, images) -> ForwardOutput:
        x1, c2, c3 = self.backbone(images)
        if not self.cfg.has_mask:
            return ForwardOutput(self.embed(x1), None, None)
        mask = self.decode_mask(x1, c2, c3)
        applied = mask
        if self.binarize_t is not None and not self.training:
            applied = binarize_mask(mask, self.binarize_t)
        if self.cfg.mask_mode == "fc":
            emb = apply_mask(self.embed(x1), applied, "fc")
        else:
            emb = self.embed(apply_mask(x1, applied, self.cfg.mask_mode))
        return ForwardOutput(emb, self.opp(mask), mask)

    def trunk_state(self) -> dict[str, torch.Tensor]:
        """Parameters shared with the mask-free network (backbone and embedding head)."""
        return {k: v for k, v in self.state_dict().items() if k.startswith(("backbone.", "embed."))}

    def module_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"backbone": list(self.backbone.parameters()), "embed": list(self.embed.parameters())}
        if self.cfg.has_mask:
            groups["pyramid"] = list(self.pyramid.parameters())
            groups["decoder"] = list(self.decoder.parameters())
            groups["opp"] = list(self.opp.parameters())
        return groups
