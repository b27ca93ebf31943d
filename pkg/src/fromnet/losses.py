"""Margin-based softmax family and the occlusion-pattern losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ACOS_EPS = 1e-7


@dataclass(frozen=True)
class MarginSpec:
    """Target logit is ``s * (cos(m1 * theta + m2) - m3)``.

    ``m1 = 1`` means no multiplicative margin.
    """

    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.35
    s: float = 30.0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.m1 < 0:
            raise ValueError(f"m1 must be non-negative, got {self.m1}")

    @classmethod
    def sphereface(cls, m1: float = 4.0, s: float = 30.0) -> "MarginSpec":
        return cls(m1, 0.0, 0.0, s)

    @classmethod
    def arcface(cls, m2: float = 0.5, s: float = 30.0) -> "MarginSpec":
        return cls(1.0, m2, 0.0, s)

    @classmethod
    def cosface(cls, m3: float = 0.35, s: float = 30.0) -> "MarginSpec":
        return cls(1.0, 0.0, m3, s)

    @classmethod
    def from_preset(cls, preset: str, s: float = 30.0, **margins) -> "MarginSpec":
        presets = {"sphereface": cls.sphereface, "arcface": cls.arcface, "cosface": cls.cosface}
        if preset not in presets:
            raise ValueError(f"unknown loss preset {preset!r}; expected one of {sorted(presets)}")
        return presets[preset](s=s, **margins)

    @property
    def uses_angle(self) -> bool:
        return self.m1 != 1.0 or self.m2 != 0.0


def cosine_logits(embeddings: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """cos(theta_j) between length-normalized embeddings (N, d) and class weights (n, d)."""
    return F.normalize(embeddings, dim=1) @ F.normalize(weights, dim=1).t()


def target_logit(cos_y: torch.Tensor, spec: MarginSpec) -> torch.Tensor:
    if not spec.uses_angle:
        return cos_y - spec.m3
    # acos has an infinite derivative at +-1: the value comes from the exact
    # angle, the gradient from the clamped one
    exact = torch.acos(cos_y.clamp(-1.0, 1.0)).detach()
    safe = torch.acos(cos_y.clamp(-1 + ACOS_EPS, 1 - ACOS_EPS))
    theta = safe + (exact - safe.detach())
    return torch.cos(spec.m1 * theta + spec.m2) - spec.m3


def margin_loss(cos: torch.Tensor, labels: torch.Tensor, spec: MarginSpec) -> torch.Tensor:
    if cos.ndim != 2 or cos.shape[0] == 0:
        raise ValueError(f"margin_loss needs a non-empty (N, n) cosine matrix, got {tuple(cos.shape)}")
    labels = labels.long()
    if labels.min() < 0 or labels.max() >= cos.shape[1]:
        raise ValueError("class label out of range")
    cos = cos.clamp(-1.0, 1.0)
    cos_y = cos.gather(1, labels[:, None]).squeeze(1)
    delta = target_logit(cos_y, spec)
    # loss_i = log(1 + sum_{j != y} exp(s*cos_j - s*delta)), evaluated with
    # logsumexp + log(1 + e^x) so tiny losses keep full relative precision
    # (F.softplus turns linear above x = 20 and would drop the log1p tail)
    rel = spec.s * (cos - delta[:, None])
    is_target = F.one_hot(labels, cos.shape[1]).bool()
    rel = rel.masked_fill(is_target, float("-inf"))
    z = torch.logsumexp(rel, dim=1)
    return torch.logaddexp(z, torch.zeros_like(z)).mean()


class MarginHead(nn.Module):
    """Class-weight matrix producing cosine logits for the margin loss."""

    def __init__(self, embedding_dim: int, num_classes: int, spec: MarginSpec):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(num_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        cos = cosine_logits(embeddings, self.weight)
        return margin_loss(cos, labels, self.spec), cos


def pattern_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = labels.long()
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"pattern label out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def pattern_reg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between predicted and target normalized corners."""
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise ValueError(f"expected matching (N, 4) tensors, got {tuple(pred.shape)} and {tuple(target.shape)}")
    return torch.linalg.vector_norm(target - pred, dim=1).mean()


def total_loss(l_margin: torch.Tensor, l_pred: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return l_margin + 0.0 * l_pred
    return l_margin + lam * l_pred
