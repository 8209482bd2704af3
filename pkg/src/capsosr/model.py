"""Encoder presets and the assembled capsule CVAE."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .capsnet import ClassCapsules, DenseClassCapsules, PrimaryCapsules
from .decoder import Decoder, embed_and_shift, select_decoder_label
from .loss import CVAE, LEGACY, legacy_closed_set_probs, legacy_distances
from .targets import TargetBank
from .variational import CapsuleDistribution, ProbabilisticHead, class_posterior, reparameterize

ENCODER_PRESETS = ("tiny-conv", "residual-small")


def _conv_bn(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


class TinyConv(nn.Module):
    """Two strided conv stages. Returns the feature map and the lateral maps [x, x1, x2]."""

    def __init__(self, in_channels: int, width: int = 16):
        super().__init__()
        self.stages = nn.ModuleList([_conv_bn(in_channels, width, 2), _conv_bn(width, 2 * width, 2)])
        self.out_channels = 2 * width

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        laterals = [x]
        for stage in self.stages:
            x = stage(x)
            laterals.append(x)
        return x, laterals


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResidualSmall(nn.Module):
    """ResNet20-shaped stack: stem plus three stages of three basic blocks."""

    def __init__(self, in_channels: int, width: int = 16, blocks: int = 3):
        super().__init__()
        self.stem = _conv_bn(in_channels, width, 1)
        stages = []
        cin = width
        for i, cout in enumerate((width, 2 * width, 4 * width)):
            layers = [BasicBlock(cin, cout, 1 if i == 0 else 2)]
            layers += [BasicBlock(cout, cout, 1) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.out_channels = cin

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        laterals = [x]
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            laterals.append(x)
        return x, laterals


def build_encoder(preset: str, in_channels: int, width: int) -> nn.Module:
    if preset == "tiny-conv":
        return TinyConv(in_channels, width)
    if preset == "residual-small":
        return ResidualSmall(in_channels, width)
    raise ValueError(f"unknown encoder preset {preset!r}; choose from {ENCODER_PRESETS}")


@dataclass
class ModelOutput:
    dist: CapsuleDistribution
    distances: Tensor  # [B, K]; lower = closer to class k
    probs: Tensor  # [B, K]
    y_pred: Tensor  # [B]
    z: Tensor | None = None
    x_hat: Tensor | None = None
    decoder_label: Tensor | None = None


class CapsuleCVAE(nn.Module):
    """Encoder -> primary capsules -> class capsules -> Gaussian head, with targets and decoder."""

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        n_classes: int,
        latent_dim: int = 8,
        primary_dim: int = 8,
        primary_channels: int = 8,
        class_dim: int = 16,
        encoder: str = "tiny-conv",
        width: int = 16,
        capsule_layer: str = "routing",
        routing_iterations: int = 3,
        routing_mode: str = "standard",
        routing_softmax_axis: str = "outputs",
        target_mode: str = "learnable",
        margin: float | list[float] = 10.0,
        freeze_target_variance: bool = False,
        dropout_rate: float = 0.5,
        gamma: float = 1.0,
        loss_mode: str = CVAE,
        decoder_width: int = 32,
    ):
        super().__init__()
        if loss_mode not in (CVAE, LEGACY):
            raise ValueError(f"unknown loss mode {loss_mode!r}")
        self.image_shape = tuple(image_shape)
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.gamma = gamma
        self.loss_mode = loss_mode

        C, H, W = self.image_shape
        self.encoder = build_encoder(encoder, C, width)
        self.primary = PrimaryCapsules(self.encoder.out_channels, primary_channels, primary_dim)
        # shape probe in eval mode so BatchNorm running stats stay untouched
        self.encoder.eval()
        with torch.no_grad():
            feat, laterals = self.encoder(torch.zeros(1, C, H, W))
            self.primary(feat)
        self.encoder.train()
        gh, gw = self.primary.grid_shape
        n_primary = primary_channels * gh * gw
        if capsule_layer == "routing":
            self.class_caps = ClassCapsules(
                n_primary, n_classes, primary_dim, class_dim, routing_iterations, routing_mode, routing_softmax_axis
            )
        elif capsule_layer == "fc":
            self.class_caps = DenseClassCapsules(n_primary, n_classes, primary_dim, class_dim)
        else:
            raise ValueError(f"unknown capsule layer {capsule_layer!r}")
        self.head = ProbabilisticHead(class_dim, latent_dim)
        self.targets = TargetBank(n_classes, latent_dim, target_mode, margin, freeze_target_variance)
        self.decoder = Decoder(
            n_classes,
            latent_dim,
            [tuple(t.shape[1:]) for t in laterals],
            (decoder_width, gh, gw),
            dropout_rate,
        )

    def encode(self, x: Tensor) -> tuple[CapsuleDistribution, list[Tensor]]:
        if tuple(x.shape[1:]) != self.image_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} != model image shape {self.image_shape}")
        feat, laterals = self.encoder(x)
        v = self.class_caps(self.primary(feat))
        return self.head(v), laterals

    def class_distances(self, dist: CapsuleDistribution) -> Tensor:
        if self.loss_mode == LEGACY:
            return legacy_distances(dist)
        return self.targets.distances(dist)

    def class_probs(self, dist: CapsuleDistribution, distances: Tensor) -> Tensor:
        if self.loss_mode == LEGACY:
            return legacy_closed_set_probs(dist)
        return class_posterior(distances, self.gamma).probs

    def forward(
        self,
        x: Tensor,
        y: Tensor | None = None,
        training: bool = False,
        generator: torch.Generator | None = None,
        reconstruct: bool = True,
    ) -> ModelOutput:
        dist, laterals = self.encode(x)
        distances = self.class_distances(dist)
        probs = self.class_probs(dist, distances)
        y_pred = probs.argmax(dim=1)
        out = ModelOutput(dist=dist, distances=distances, probs=probs, y_pred=y_pred)
        if not reconstruct:
            return out
        # sampled capsules while training, the means otherwise
        out.z = reparameterize(dist, generator).z if training else dist.mu
        label = select_decoder_label(y, y_pred, training)
        out.decoder_label = label
        shifted = embed_and_shift(out.z, label, self.decoder.embedding)
        out.x_hat = self.decoder(shifted, laterals, training=training, generator=generator)
        return out
