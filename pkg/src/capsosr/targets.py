"""Per-class Gaussian targets and the losses that attract/repel them."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .variational import CapsuleDistribution, distances_to_bank

FIXED = "fixed"
LEARNABLE = "learnable"

# softplus(_RAW_ONE) == 1
_RAW_ONE = math.log(math.e - 1.0)


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward, zero backward."""
    return t.detach()


class TargetBank(nn.Module):
    """K Gaussian targets, each spanning all K capsule slots: ``mu``/``var`` are [K, K, d].

    Target k starts with ones in slot k, zeros elsewhere, and unit variance.
    In fixed mode both are buffers and never receive gradients.
    """

    def __init__(
        self,
        n_classes: int,
        latent_dim: int,
        mode: str = LEARNABLE,
        margin: float | list[float] = 10.0,
        freeze_variance: bool = False,
    ):
        super().__init__()
        if n_classes < 2:
            raise ValueError("a target bank needs at least 2 classes")
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if mode not in (FIXED, LEARNABLE):
            raise ValueError(f"unknown target mode {mode!r}")
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.mode = mode
        margins = [float(margin)] * n_classes if isinstance(margin, (int, float)) else [float(m) for m in margin]
        if len(margins) != n_classes:
            raise ValueError("need one margin per class")
        self.register_buffer("margins", torch.tensor(margins))

        mu = torch.eye(n_classes).unsqueeze(-1).repeat(1, 1, latent_dim)
        raw = torch.full((n_classes, n_classes, latent_dim), _RAW_ONE)
        if mode == LEARNABLE:
            self.mu = nn.Parameter(mu)
            if freeze_variance:
                self.register_buffer("raw_var", raw)
            else:
                self.raw_var = nn.Parameter(raw)
        else:
            self.register_buffer("mu", mu)
            self.register_buffer("raw_var", raw)

    @property
    def var(self) -> Tensor:
        if self.mode == FIXED:
            # exact ones, not softplus(_RAW_ONE) rounded
            return torch.ones_like(self.raw_var)
        return F.softplus(self.raw_var)

    def distances(self, C: CapsuleDistribution) -> Tensor:
        """d(C, T_k) for every target: [B, K]."""
        return distances_to_bank(C, self.mu, self.var)


def _check_labels(y: Tensor, n_classes: int) -> None:
    if y.numel() and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")


def kl_attraction_loss(C: CapsuleDistribution, y: Tensor, bank: TargetBank) -> Tensor:
    """Batch mean of d(C, sg[T_y]); gradients reach C only."""
    _check_labels(y, bank.n_classes)
    d = distances_to_bank(C, stop_gradient(bank.mu), stop_gradient(bank.var))
    return d.gather(1, y.view(-1, 1)).squeeze(1).mean()


def contrastive_loss(C: CapsuleDistribution, y: Tensor, bank: TargetBank) -> Tensor:
    """Batch mean of ``1/(K-1) sum_{k != y} [m_k - d(sg[C], T_k)]^+``; gradients reach targets only."""
    K = bank.n_classes
    if K < 2:
        raise ValueError("contrastive loss needs K >= 2")
    _check_labels(y, K)
    d = distances_to_bank(C.detach(), bank.mu, bank.var)
    hinge = torch.relu(bank.margins.to(d.dtype) - d)
    off = torch.ones_like(hinge).scatter_(1, y.view(-1, 1), 0.0)
    return ((hinge * off).sum(dim=1) / (K - 1)).mean()


@torch.no_grad()
def pairwise_target_distances(bank: TargetBank) -> Tensor:
    """Matrix of d(T_i, T_j) with T_i read as a capsule distribution."""
    return distances_to_bank(CapsuleDistribution(bank.mu, bank.var), bank.mu, bank.var)


def min_pairwise_target_distance(bank: TargetBank) -> float:
    D = pairwise_target_distances(bank)
    K = D.shape[0]
    iu = torch.triu_indices(K, K, offset=1)
    return float(D[iu[0], iu[1]].min())
