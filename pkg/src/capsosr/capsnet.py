"""Capsule layers: squash, pose transformation and dynamic routing.

Shapes follow a batch-first convention throughout:

    primary capsules  u      [B, n_primary, f1]
    pose weights      W      [n_primary, K, f2, f1]
    predictions       u_hat  [B, n_primary, K, f2]
    class capsules    v      [B, K, f2]
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

STANDARD = "standard"
GATED = "gated"
ROUTING_MODES = (STANDARD, GATED)


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite entries")


def squash(v: Tensor, dim: int = -1) -> Tensor:
    """Rescale vectors along ``dim`` to norm ``|v|^2 / (1 + |v|^2)``.

    The zero vector maps to zero with zero gradient.
    """
    _check_finite(v, "squash input")
    sq = (v * v).sum(dim=dim, keepdim=True)
    nonzero = sq > 0
    # sqrt is only evaluated on a safe operand so the backward pass stays finite at 0
    safe_sq = torch.where(nonzero, sq, torch.ones_like(sq))
    scale = torch.where(nonzero, safe_sq.sqrt() / (1.0 + safe_sq), torch.zeros_like(sq))
    return scale * v


def pose_transform(u: Tensor, W: Tensor) -> Tensor:
    """Per-pair linear predictions ``u_hat[b, i, j] = W[i, j] @ u[b, i]``."""
    if u.dim() != 3 or W.dim() != 4:
        raise ValueError(f"expected u [B, n, f1] and W [n, K, f2, f1], got {tuple(u.shape)} and {tuple(W.shape)}")
    if u.shape[1] != W.shape[0] or u.shape[2] != W.shape[3]:
        raise ValueError(f"shape mismatch: u {tuple(u.shape)} vs W {tuple(W.shape)}")
    return torch.einsum("ijpq,biq->bijp", W, u)


@dataclass
class RoutingState:
    """Logits and coupling coefficients after the last routing iteration."""

    logits: Tensor  # [B, n_primary, K]
    coefficients: Tensor  # [B, n_primary, K]
    iteration: int
    mode: str
    history: list[Tensor]  # coefficients of every iteration, detached


def _couple(b: Tensor, mode: str, gate_bias: Tensor | None, softmax_axis: str) -> Tensor:
    dim = 2 if softmax_axis == "outputs" else 1
    c = torch.softmax(b, dim=dim)
    if mode == GATED:
        c = torch.relu(c + gate_bias)
    return c


def dynamic_routing(
    u_hat: Tensor,
    iterations: int = 3,
    mode: str = STANDARD,
    gate_bias: Tensor | float | None = None,
    softmax_axis: str = "outputs",
) -> tuple[Tensor, RoutingState]:
    """Routing-by-agreement from predictions ``u_hat`` [B, n, K, f2].

    Logit updates are computed on detached predictions, so gradients reach
    ``u_hat`` only through the last weighted sum and squash. In gated mode the
    final coupling keeps its dependence on ``gate_bias`` so the bias is trainable.

    ``softmax_axis="outputs"`` distributes each input capsule's coupling over
    the K class capsules; ``"inputs"`` normalizes over input capsules instead.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if mode not in ROUTING_MODES:
        raise ValueError(f"unknown routing mode {mode!r}")
    if (gate_bias is None) != (mode != GATED):
        raise ValueError("gate_bias must be given exactly when mode is 'gated'")
    if softmax_axis not in ("outputs", "inputs"):
        raise ValueError(f"unknown softmax axis {softmax_axis!r}")
    if u_hat.dim() != 4:
        raise ValueError(f"u_hat must be [B, n, K, f2], got {tuple(u_hat.shape)}")
    if mode == GATED and not torch.is_tensor(gate_bias):
        gate_bias = torch.tensor(float(gate_bias), dtype=u_hat.dtype)

    u_const = u_hat.detach()
    bias_const = gate_bias.detach() if mode == GATED else None
    b = torch.zeros(u_hat.shape[:3], dtype=u_hat.dtype, device=u_hat.device)
    history = []
    for it in range(iterations):
        last = it == iterations - 1
        c = _couple(b, mode, bias_const, softmax_axis)
        history.append(c)
        if last:
            c = _couple(b, mode, gate_bias, softmax_axis)
            v = squash((c.unsqueeze(-1) * u_hat).sum(dim=1))
        else:
            v = squash((c.unsqueeze(-1) * u_const).sum(dim=1))
            b = b + (u_const * v.unsqueeze(1)).sum(dim=-1)
    state = RoutingState(logits=b, coefficients=c, iteration=iterations, mode=mode, history=history)
    return v, state


class PrimaryCapsules(nn.Module):
    """Convolution reshaped into ``channels * h * w`` capsules of size ``dim``."""

    def __init__(self, in_channels: int, channels: int = 8, dim: int = 8, kernel_size: int = 3, stride: int = 2):
        super().__init__()
        self.channels = channels
        self.dim = dim
        self.conv = nn.Conv2d(in_channels, channels * dim, kernel_size, stride=stride, padding=kernel_size // 2)
        self.grid_shape: tuple[int, int] | None = None

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv(x)
        B, _, h, w = out.shape
        self.grid_shape = (h, w)
        out = out.view(B, self.channels, self.dim, h, w).permute(0, 1, 3, 4, 2)
        return squash(out.reshape(B, self.channels * h * w, self.dim))


class ClassCapsules(nn.Module):
    """Pose transform followed by dynamic routing to ``n_classes`` capsules."""

    def __init__(
        self,
        n_primary: int,
        n_classes: int,
        in_dim: int,
        out_dim: int,
        iterations: int = 3,
        mode: str = STANDARD,
        softmax_axis: str = "outputs",
    ):
        super().__init__()
        self.iterations = iterations
        self.mode = mode
        self.softmax_axis = softmax_axis
        self.W = nn.Parameter(0.05 * torch.randn(n_primary, n_classes, out_dim, in_dim))
        self.gate_bias = nn.Parameter(torch.zeros(())) if mode == GATED else None
        self.last_state: RoutingState | None = None
        # when set, replaces routing with these fixed couplings [B, n, K]
        self.frozen_coefficients: Tensor | None = None

    def forward(self, u: Tensor) -> Tensor:
        u_hat = pose_transform(u, self.W)
        if self.frozen_coefficients is not None:
            return squash((self.frozen_coefficients.unsqueeze(-1) * u_hat).sum(dim=1))
        v, self.last_state = dynamic_routing(
            u_hat, self.iterations, self.mode, self.gate_bias, self.softmax_axis
        )
        return v


class DenseClassCapsules(nn.Module):
    """Ablation stand-in: one affine map from all primary capsules to K x f2."""

    def __init__(self, n_primary: int, n_classes: int, in_dim: int, out_dim: int):
        super().__init__()
        self.n_classes = n_classes
        self.out_dim = out_dim
        self.fc = nn.Linear(n_primary * in_dim, n_classes * out_dim)

    def forward(self, u: Tensor) -> Tensor:
        return squash(self.fc(u.flatten(1)).view(-1, self.n_classes, self.out_dim))
