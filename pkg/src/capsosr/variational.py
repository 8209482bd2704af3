"""Probabilistic capsules: diagonal Gaussians per class capsule."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

VAR_FLOOR = 1e-8


@dataclass
class CapsuleDistribution:
    """K diagonal Gaussians; ``mu`` and ``var`` are [..., K, d]. ``var`` holds variances."""

    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.var.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and var {tuple(self.var.shape)} differ")

    def detach(self) -> "CapsuleDistribution":
        return CapsuleDistribution(self.mu.detach(), self.var.detach())


@dataclass
class LatentSample:
    z: Tensor
    noise: Tensor


@dataclass
class ClassPosterior:
    probs: Tensor
    gamma: float
    distances: Tensor


class ProbabilisticHead(nn.Module):
    """Capsule-wise affine maps f2 -> d for means and (softplus) variances.

    The same two maps are shared by all K capsule slots.
    """

    def __init__(self, in_dim: int, latent_dim: int):
        super().__init__()
        self.mean = nn.Linear(in_dim, latent_dim)
        self.pre_var = nn.Linear(in_dim, latent_dim)

    def forward(self, v: Tensor) -> CapsuleDistribution:
        if v.shape[-1] != self.mean.in_features:
            raise ValueError(f"capsule dim {v.shape[-1]} != head input {self.mean.in_features}")
        mu = self.mean(v)
        var = F.softplus(self.pre_var(v)).clamp_min(VAR_FLOOR)
        return CapsuleDistribution(mu, var)


def reparameterize(dist: CapsuleDistribution, generator: torch.Generator | None = None, noise: Tensor | None = None) -> LatentSample:
    """Draw ``z = mu + sqrt(var) * eps``; ``eps`` comes from ``generator`` unless given."""
    if noise is None:
        noise = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype, device=dist.mu.device)
    return LatentSample(z=dist.mu + dist.var.sqrt() * noise, noise=noise)


def kl_diag_gauss(mu1: Tensor, var1: Tensor, mu2: Tensor, var2: Tensor) -> Tensor:
    """KL(N(mu1, var1) || N(mu2, var2)) for diagonal Gaussians, summed over the last axis."""
    if (var1 <= 0).any() or (var2 <= 0).any():
        raise ValueError("variances must be strictly positive")
    terms = 0.5 * (torch.log(var2) - torch.log(var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0)
    return terms.sum(dim=-1)


def capsule_distance(C: CapsuleDistribution, T_mu: Tensor, T_var: Tensor) -> Tensor:
    """Mean over the K capsule slots of the per-slot KL(C || T).

    ``C`` is [..., K, d], targets [..., K, d]; broadcasting applies over the
    leading axes, so ``C.mu[:, None]`` against a bank [K_t, K, d] yields [B, K_t].
    """
    if C.mu.shape[-2:] != T_mu.shape[-2:]:
        raise ValueError(f"capsule shape {tuple(C.mu.shape[-2:])} != target shape {tuple(T_mu.shape[-2:])}")
    return kl_diag_gauss(C.mu, C.var, T_mu, T_var).mean(dim=-1)


def distances_to_bank(C: CapsuleDistribution, T_mu: Tensor, T_var: Tensor) -> Tensor:
    """Distances from a batch [B, K, d] to every target in a bank [K_t, K, d] -> [B, K_t]."""
    return capsule_distance(
        CapsuleDistribution(C.mu.unsqueeze(1), C.var.unsqueeze(1)), T_mu.unsqueeze(0), T_var.unsqueeze(0)
    )


def class_posterior(distances: Tensor, gamma: float = 1.0) -> ClassPosterior:
    """softmax(-gamma * distances) along the last axis."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if distances.numel() == 0 or distances.shape[-1] == 0:
        raise ValueError("empty distance vector")
    # softmax subtracts the max logit internally
    probs = torch.softmax(-gamma * distances, dim=-1)
    return ClassPosterior(probs=probs, gamma=gamma, distances=distances)
