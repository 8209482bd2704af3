"""Data preparation and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, build_model
from .config import ExperimentConfig
from .datasets import load_dataset
from .loss import LEGACY, LossBreakdown, total_loss_cvae, total_loss_legacy
from .protocol import SplitSpec, load_splits, make_splits, synth_mnist_noise, synth_noise_dataset
from .targets import min_pairwise_target_distance

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics, sort_keys=True)}")
        self.diagnostics = diagnostics


@dataclass
class OpenSetData:
    """Closed training data plus an open test set; labels are 0..K-1, unknowns carry K."""

    known_classes: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    calib_x: np.ndarray
    calib_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.known_classes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


def _limit_per_class(labels: np.ndarray, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if limit is not None and len(members) > limit:
            members = np.sort(rng.choice(members, limit, replace=False))
        idx.append(members)
    return np.sort(np.concatenate(idx)) if idx else np.array([], dtype=int)


def resolve_split(config: ExperimentConfig) -> SplitSpec:
    if config.split_file:
        splits = load_splits(config.split_file)
    else:
        splits = make_splits(config.dataset, max(config.split_index + 1, 1), config.n_known, config.split_seed)
    if not 0 <= config.split_index < len(splits):
        raise ValueError(f"split_index {config.split_index} out of range for {len(splits)} splits")
    return splits[config.split_index]


def split_open_set_data(
    config: ExperimentConfig,
    split: SplitSpec,
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
) -> OpenSetData:
    rng = np.random.default_rng(config.data_seed)
    known = list(split.known)
    remap = {c: i for i, c in enumerate(known)}
    K = len(known)

    tx, ty = train
    mask = np.isin(ty, known)
    tx, ty = tx[mask], np.array([remap[int(c)] for c in ty[mask]], dtype=np.int64)
    keep = _limit_per_class(ty, config.max_train_per_class, rng)
    tx, ty = tx[keep], ty[keep]
    perm = rng.permutation(len(ty))
    n_cal = int(round(config.calibration_fraction * len(ty)))
    cal, fit = np.sort(perm[:n_cal]), np.sort(perm[n_cal:])

    ex, ey = test
    keep = _limit_per_class(ey, config.max_test_per_class, rng)
    ex, ey = ex[keep], ey[keep]
    kmask = np.isin(ey, known)
    known_x = ex[kmask]
    known_y = np.array([remap[int(c)] for c in ey[kmask]], dtype=np.int64)
    if config.open_set == "split":
        unknown_x = ex[np.isin(ey, split.unknown)]
    elif config.open_set == "noise":
        unknown_x = synth_noise_dataset(len(known_x), known_x.shape[1:], seed=config.noise_seed)
    else:
        noise = synth_noise_dataset(len(known_x), known_x.shape[1:], seed=config.noise_seed)
        unknown_x = synth_mnist_noise(known_x, noise)
    test_x = np.concatenate([known_x, unknown_x]).astype(np.float32)
    test_y = np.concatenate([known_y, np.full(len(unknown_x), K, dtype=np.int64)])
    return OpenSetData(known, tx[fit], ty[fit], tx[cal], ty[cal], test_x, test_y)


def prepare_data(config: ExperimentConfig) -> OpenSetData:
    split = resolve_split(config)
    train = load_dataset(config.dataset, "train", config.data_dir)
    test = load_dataset(config.dataset, "test", config.data_dir)
    return split_open_set_data(config, split, train, test)


def _dtype(config: ExperimentConfig) -> torch.dtype:
    return torch.float64 if config.dtype == "float64" else torch.float32


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def batch_indices(n: int, batch_size: int, data_seed: int, step: int) -> np.ndarray:
    """Indices of the batch at global ``step``; a fresh permutation per epoch keeps resumption exact."""
    spe = steps_per_epoch(n, batch_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([data_seed, epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def compute_loss(model, config: ExperimentConfig, x: torch.Tensor, y: torch.Tensor, generator) -> LossBreakdown:
    """One training forward pass and the configured objective."""
    if config.loss_mode == "softmax_baseline":
        out = model(x, y, training=True, generator=generator, reconstruct=False)
        ce = F.cross_entropy(-model.gamma * out.distances, y)
        zero = torch.zeros((), dtype=ce.dtype)
        return LossBreakdown(ce, ce, zero, zero, "softmax_baseline", {})
    out = model(x, y, training=True, generator=generator)
    if config.loss_mode == LEGACY:
        return total_loss_legacy(out.dist, y, out.x_hat, x, config.beta_legacy, config.lam)
    return total_loss_cvae(out.dist, y, model.targets, out.x_hat, x, config.alpha, config.beta)


def new_checkpoint(config: ExperimentConfig, data: OpenSetData) -> Checkpoint:
    model = build_model(config, data.image_shape, data.n_classes)
    return Checkpoint(config, model, data.image_shape, data.n_classes, known_classes=data.known_classes)


def total_steps(config: ExperimentConfig, n_train: int) -> int:
    if config.max_steps is not None:
        return config.max_steps
    return config.epochs * steps_per_epoch(n_train, config.batch_size)


def train(
    config: ExperimentConfig,
    data: OpenSetData | None = None,
    checkpoint: Checkpoint | None = None,
    log_path=None,
    until_step: int | None = None,
) -> Checkpoint:
    """Optimise the configured loss; resumes from ``checkpoint`` if given.

    Appends one JSON record per step (loss terms) and per finished epoch
    (``min_pairwise_target_distance``) to ``log_path``.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    if data is None:
        data = prepare_data(config)
    ckpt = checkpoint if checkpoint is not None else new_checkpoint(config, data)
    model = ckpt.model
    model.train()
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.lr)
    if ckpt.optimizer_state is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)
    generator = torch.Generator().manual_seed(config.noise_seed)
    if ckpt.noise_state is not None:
        generator.set_state(ckpt.noise_state)

    dtype = _dtype(config)
    n = len(data.train_y)
    spe = steps_per_epoch(n, config.batch_size)
    end = total_steps(config, n) if until_step is None else until_step
    logf = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(ckpt.step, end):
            idx = batch_indices(n, config.batch_size, config.data_seed, step)
            x = torch.as_tensor(data.train_x[idx], dtype=dtype)
            y = torch.as_tensor(data.train_y[idx])
            optimizer.zero_grad()
            try:
                losses = compute_loss(model, config, x, y, generator)
                finite = bool(torch.isfinite(losses.total))
                terms = {k: v for k, v in losses.as_floats().items() if k != "mode"}
            except ValueError as e:
                # non-finite activations are rejected inside the forward pass
                if "non-finite" not in str(e):
                    raise
                finite, terms = False, {"error": str(e)}
            if not finite:
                diag = {
                    "step": step,
                    "batch_min": float(x.min()),
                    "batch_max": float(x.max()),
                    "batch_nan": int(torch.isnan(x).sum()),
                    "labels": y.tolist(),
                    **terms,
                }
                if logf:
                    logf.write(json.dumps({"event": "diverged", **diag}, sort_keys=True) + "\n")
                raise TrainingDiverged("non-finite loss", diag)
            losses.total.backward()
            optimizer.step()
            record = {"event": "step", "step": step + 1, "epoch": step // spe, **losses.as_floats()}
            if logf:
                logf.write(json.dumps(record, sort_keys=True) + "\n")
            if (step + 1) % spe == 0 or step + 1 == end:
                mpd = min_pairwise_target_distance(model.targets)
                if logf:
                    logf.write(
                        json.dumps({"event": "epoch", "step": step + 1, "epoch": step // spe,
                                    "min_pairwise_target_distance": mpd}, sort_keys=True) + "\n"
                    )
                log.info("step %d loss %.4f min target distance %.4f", step + 1, record["total"], mpd)
            ckpt.step = step + 1
            ckpt.last_loss = record["total"]
    finally:
        if logf:
            logf.close()
    ckpt.optimizer_state = optimizer.state_dict()
    ckpt.noise_state = generator.get_state()
    return ckpt


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
