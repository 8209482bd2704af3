"""Checkpoints: named tensors in a safetensors container plus one JSON metadata blob.

Tensor names are sorted and the metadata is a single key holding sorted-key
JSON, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .config import ExperimentConfig
from .detector import ClassGaussianFit, Thresholds
from .model import CapsuleCVAE

FORMAT_VERSION = 1
_META_KEY = "capsosr"


def build_model(config: ExperimentConfig, image_shape, n_classes: int) -> CapsuleCVAE:
    torch.manual_seed(config.seed)
    model = CapsuleCVAE(
        image_shape=tuple(image_shape),
        n_classes=n_classes,
        latent_dim=config.latent_dim,
        primary_dim=config.primary_dim,
        primary_channels=config.primary_channels,
        class_dim=config.class_dim,
        encoder=config.encoder,
        width=config.width,
        capsule_layer=config.capsule_layer,
        routing_iterations=config.routing_iterations,
        routing_mode=config.routing_mode,
        routing_softmax_axis=config.routing_softmax_axis,
        target_mode=config.target_mode,
        margin=config.margin,
        freeze_target_variance=config.freeze_target_variance,
        dropout_rate=config.dropout_rate,
        gamma=config.gamma,
        loss_mode="cvae" if config.loss_mode == "softmax_baseline" else config.loss_mode,
        decoder_width=config.decoder_width,
    )
    if config.dtype == "float64":
        model = model.double()
    return model


@dataclass
class Checkpoint:
    config: ExperimentConfig
    model: CapsuleCVAE
    image_shape: tuple[int, int, int]
    n_classes: int
    step: int = 0
    optimizer_state: dict | None = None
    noise_state: torch.Tensor | None = None
    thresholds: Thresholds | None = None
    class_fit: ClassGaussianFit | None = None
    known_classes: list[int] | None = None
    last_loss: float | None = None

    def to_bytes(self) -> bytes:
        tensors = {f"model.{k}": v.detach().contiguous().clone() for k, v in self.model.state_dict().items()}
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "image_shape": list(self.image_shape),
            "n_classes": self.n_classes,
            "step": self.step,
            "known_classes": self.known_classes,
            "last_loss": self.last_loss,
            "thresholds": None if self.thresholds is None else self.thresholds.to_dict(),
            "class_fit": None if self.class_fit is None else self.class_fit.to_dict(),
            "param_groups": None,
        }
        if self.optimizer_state is not None:
            for idx, state in self.optimizer_state["state"].items():
                for key, value in state.items():
                    tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value).clone()
            meta["param_groups"] = self.optimizer_state["param_groups"]
        if self.noise_state is not None:
            tensors["rng.noise"] = self.noise_state.clone()
        ordered = {k: tensors[k] for k in sorted(tensors)}
        return st_save(ordered, metadata={_META_KEY: json.dumps(meta, sort_keys=True)})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header_len = int.from_bytes(data[:8], "little")
        header = json.loads(data[8 : 8 + header_len])
        meta = json.loads(header["__metadata__"][_META_KEY])
        if meta["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
        tensors = st_load(data)
        config = ExperimentConfig.from_dict(meta["config"])
        model = build_model(config, meta["image_shape"], meta["n_classes"])
        model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
        optimizer_state = None
        if meta["param_groups"] is not None:
            state: dict[int, dict] = {}
            for k, v in tensors.items():
                if k.startswith("optim."):
                    _, idx, key = k.split(".", 2)
                    state.setdefault(int(idx), {})[key] = v
            optimizer_state = {"state": state, "param_groups": meta["param_groups"]}
        return cls(
            config=config,
            model=model,
            image_shape=tuple(meta["image_shape"]),
            n_classes=meta["n_classes"],
            step=meta["step"],
            optimizer_state=optimizer_state,
            noise_state=tensors.get("rng.noise"),
            thresholds=None if meta["thresholds"] is None else Thresholds.from_dict(meta["thresholds"]),
            class_fit=None if meta["class_fit"] is None else ClassGaussianFit.from_dict(meta["class_fit"]),
            known_classes=meta["known_classes"],
            last_loss=meta["last_loss"],
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
