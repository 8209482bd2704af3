"""Training objectives.

Two modes share one model: ``cvae`` (KL attraction to the label's target,
contrastive repulsion of the other targets, reconstruction) and
``legacy_margin`` (per-capsule KL margin loss against N(0, 1) / N(1, 1)).
All terms are reduced with a batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .decoder import reconstruction_loss
from .targets import TargetBank, contrastive_loss, kl_attraction_loss
from .variational import CapsuleDistribution, kl_diag_gauss

CVAE = "cvae"
LEGACY = "legacy_margin"
LOSS_MODES = (CVAE, LEGACY)

DENOMINATOR_EPS = 1e-8


@dataclass
class LossBreakdown:
    total: Tensor
    kl_term: Tensor
    contrastive_term: Tensor
    reconstruction_term: Tensor
    mode: str
    weights: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {
            "total": float(self.total.detach()),
            "kl_term": float(self.kl_term.detach()),
            "contrastive_term": float(self.contrastive_term.detach()),
            "reconstruction_term": float(self.reconstruction_term.detach()),
        }
        out.update({f"w_{k}": v for k, v in self.weights.items()})
        out["mode"] = self.mode
        return out


def total_loss_cvae(
    C: CapsuleDistribution,
    y: Tensor,
    bank: TargetBank,
    x_hat: Tensor,
    x: Tensor,
    alpha: float = 1.0,
    beta: float = 0.05,
) -> LossBreakdown:
    kl = kl_attraction_loss(C, y, bank)
    contr = contrastive_loss(C, y, bank)
    rec = reconstruction_loss(x_hat, x)
    return LossBreakdown(
        total=kl + alpha * contr + beta * rec,
        kl_term=kl,
        contrastive_term=contr,
        reconstruction_term=rec,
        mode=CVAE,
        weights={"alpha": alpha, "beta": beta},
    )


def _standard_normal_kl(C: CapsuleDistribution, mean: float) -> Tensor:
    """Per-capsule KL(C_k || N(mean * 1, I)) -> [B, K]."""
    return kl_diag_gauss(C.mu, C.var, torch.full_like(C.mu, mean), torch.ones_like(C.var))


def total_loss_legacy(
    C: CapsuleDistribution,
    y: Tensor,
    x_hat: Tensor,
    x: Tensor,
    beta: float = 0.0005,
    lam: float = 0.5,
) -> LossBreakdown:
    """sum_j [y_j KL(C_j || N(0,1)) + lam (1 - y_j) KL(C_j || N(1,1))] + beta * L_rec."""
    K = C.mu.shape[-2]
    if y.numel() and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    onehot = torch.nn.functional.one_hot(y, K).to(C.mu.dtype)
    present = _standard_normal_kl(C, 0.0)
    absent = _standard_normal_kl(C, 1.0)
    margin = (onehot * present + lam * (1.0 - onehot) * absent).sum(dim=1).mean()
    rec = reconstruction_loss(x_hat, x)
    zero = torch.zeros((), dtype=C.mu.dtype)
    return LossBreakdown(
        total=margin + beta * rec,
        kl_term=margin,
        contrastive_term=zero,
        reconstruction_term=rec,
        mode=LEGACY,
        weights={"beta": beta, "lambda": lam},
    )


def legacy_distances(C: CapsuleDistribution) -> Tensor:
    """KL of each capsule to N(0, I): the legacy mode's per-class distance [B, K]."""
    return _standard_normal_kl(C, 0.0)


def legacy_closed_set_probs(C: CapsuleDistribution, eps: float = DENOMINATOR_EPS) -> Tensor:
    """softmax_k 1 / (KL(C_k || N(0, I)) + eps)."""
    return torch.softmax(1.0 / (legacy_distances(C) + eps), dim=-1)
