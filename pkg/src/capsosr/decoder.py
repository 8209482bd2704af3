"""Reconstruction path: label embedding, lateral connections, transposed convolutions."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn


def embed_and_shift(z: Tensor, labels: Tensor, table: nn.Embedding) -> Tensor:
    """Add the embedding of ``labels`` [B] to every capsule slot of ``z`` [B, K, d]."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= table.num_embeddings):
        raise ValueError(f"labels must lie in [0, {table.num_embeddings})")
    return z + table(labels).unsqueeze(1)


def select_decoder_label(y_true: Tensor | None, y_pred: Tensor, training: bool) -> Tensor:
    """Teacher forcing: the true label while training, the prediction otherwise."""
    if training:
        if y_true is None:
            raise ValueError("training requires the true labels")
        return y_true
    return y_pred


def reconstruction_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Squared error summed over each sample's pixels, averaged over the batch."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return ((x_hat - x) ** 2).flatten(1).sum(dim=1).mean()


def lateral_gates(
    batch: int, n_laterals: int, rate: float, generator: torch.Generator | None, dtype=torch.float32
) -> Tensor:
    """Per-sample, per-lateral keep masks scaled by 1/(1 - rate): [n_laterals, B]."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("dropout rate must lie in [0, 1]")
    if rate == 1.0:
        return torch.zeros(n_laterals, batch, dtype=dtype)
    keep = torch.rand(n_laterals, batch, generator=generator) >= rate
    return keep.to(dtype) / (1.0 - rate)


class Lateral(nn.Module):
    """relu(BN(conv(gated feature map)))."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor, gate: Tensor | None) -> Tensor:
        if gate is not None:
            x = x * gate.to(x.dtype).view(-1, 1, 1, 1)
        return torch.relu(self.bn(self.conv(x)))


class Decoder(nn.Module):
    """Mirror of the encoder.

    ``lateral_shapes`` lists the (C, H, W) of every encoder feature map that is
    fed back, from the input image up to the deepest map; ``grid_shape`` is the
    (C, H, W) the latent code is projected onto before upsampling.
    """

    def __init__(
        self,
        n_classes: int,
        latent_dim: int,
        lateral_shapes: Sequence[tuple[int, int, int]],
        grid_shape: tuple[int, int, int],
        dropout_rate: float = 0.5,
    ):
        super().__init__()
        self.lateral_shapes = [tuple(s) for s in lateral_shapes]
        self.grid_shape = tuple(grid_shape)
        self.dropout_rate = dropout_rate
        self.embedding = nn.Embedding(n_classes, latent_dim)
        nn.init.normal_(self.embedding.weight, std=0.1)
        gc, gh, gw = self.grid_shape
        self.fc = nn.Linear(n_classes * latent_dim, gc * gh * gw)
        self.fc_bn = nn.BatchNorm1d(gc * gh * gw)

        self.ups = nn.ModuleList()
        self.laterals = nn.ModuleList()
        in_ch, h = gc, gh
        for c, lh, _ in reversed(self.lateral_shapes):
            out_ch = max(c, 8)
            stride = 2 if lh > h else 1
            self.ups.append(nn.ConvTranspose2d(in_ch, out_ch, 3, stride=stride, padding=1))
            self.laterals.append(Lateral(c, out_ch))
            in_ch, h = out_ch, lh
        image_channels = self.lateral_shapes[0][0]
        self.out = nn.Conv2d(in_ch, image_channels, 1)

    def forward(
        self,
        shifted: Tensor,
        laterals: Sequence[Tensor],
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        if len(laterals) != len(self.lateral_shapes):
            raise ValueError(f"expected {len(self.lateral_shapes)} laterals, got {len(laterals)}")
        for t, s in zip(laterals, self.lateral_shapes):
            if tuple(t.shape[1:]) != s:
                raise ValueError(f"lateral shape {tuple(t.shape[1:])} != expected {s}")
        B = shifted.shape[0]
        gates = (
            lateral_gates(B, len(laterals), self.dropout_rate, generator, shifted.dtype)
            if training
            else None
        )
        h = torch.relu(self.fc_bn(self.fc(shifted.flatten(1))))
        h = h.view(B, *self.grid_shape)
        n = len(laterals)
        for step, (up, lat) in enumerate(zip(self.ups, self.laterals)):
            idx = n - 1 - step
            feat = laterals[idx]
            h = torch.relu(up(h, output_size=feat.shape[-2:]))
            h = h + lat(feat, None if gates is None else gates[idx])
        return torch.sigmoid(self.out(h))
