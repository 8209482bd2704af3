"""Open-set evaluation protocol: splits, openness, synthetic outliers and metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# classes per dataset id, used when a caller does not pass the class list
DATASET_CLASSES = {
    "mnist": 10,
    "svhn": 10,
    "cifar10": 10,
    "tinyimagenet": 200,
}


def openness(n_known: int, n_total: int) -> float:
    """1 - sqrt(K / M)."""
    if n_known < 1 or n_known > n_total:
        raise ValueError(f"need 1 <= K <= M, got K={n_known}, M={n_total}")
    return 1.0 - math.sqrt(n_known / n_total)


@dataclass
class SplitSpec:
    dataset: str
    seed: int
    known: list[int]
    unknown: list[int]

    def __post_init__(self):
        if set(self.known) & set(self.unknown):
            raise ValueError("known and unknown classes overlap")

    @property
    def openness(self) -> float:
        return openness(len(self.known), len(self.known) + len(self.unknown))


def make_splits(dataset: str, n_splits: int = 5, n_known: int = 6, seed: int = 0, classes=None) -> list[SplitSpec]:
    """Seeded random known/unknown partitions of the dataset's classes."""
    if classes is None:
        if dataset not in DATASET_CLASSES:
            raise ValueError(f"unknown dataset {dataset!r}; pass the class list explicitly")
        classes = list(range(DATASET_CLASSES[dataset]))
    classes = [int(c) for c in classes]
    if n_known >= len(classes) or n_known < 1:
        raise ValueError(f"need 1 <= n_known < {len(classes)} classes, got {n_known}")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        perm = rng.permutation(classes)
        splits.append(
            SplitSpec(dataset, seed, sorted(int(c) for c in perm[:n_known]), sorted(int(c) for c in perm[n_known:]))
        )
    return splits


def dump_splits(splits: list[SplitSpec]) -> str:
    if not splits:
        raise ValueError("no splits to serialize")
    doc = {
        "dataset": splits[0].dataset,
        "seed": splits[0].seed,
        "splits": [{"known": s.known, "unknown": s.unknown} for s in splits],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_splits(splits: list[SplitSpec], path) -> Path:
    path = Path(path)
    path.write_text(dump_splits(splits))
    return path


def load_splits(path) -> list[SplitSpec]:
    doc = json.loads(Path(path).read_text())
    missing = {"dataset", "seed", "splits"} - doc.keys()
    if missing:
        raise ValueError(f"split file lacks keys {sorted(missing)}")
    return [SplitSpec(doc["dataset"], int(doc["seed"]), list(s["known"]), list(s["unknown"])) for s in doc["splits"]]


def synth_noise_dataset(n: int, shape=(1, 28, 28), seed: int = 0) -> np.ndarray:
    """``n`` images of i.i.d. U[0, 1] pixels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).random((n, *shape), dtype=np.float32)


def synth_mnist_noise(digits: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Digits superimposed on noise: clip(digit + noise, 0, 1)."""
    digits = np.asarray(digits)
    noise = np.asarray(noise)
    if digits.shape != noise.shape:
        raise ValueError(f"shape mismatch: {digits.shape} vs {noise.shape}")
    return np.clip(digits + noise, 0.0, 1.0).astype(np.float32)


def auroc(known_scores, unknown_scores) -> float:
    """P(known score > unknown score) + 0.5 P(tie), via midranks."""
    a = np.asarray(known_scores, dtype=float).ravel()
    b = np.asarray(unknown_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be non-empty")
    allv = np.concatenate([a, b])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    ranks = np.empty(allv.size)
    # midranks over tie groups
    _, first, counts = np.unique(sorted_v, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def macro_f1(y_true, y_pred, n_labels: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Macro F1 over labels 0..n_labels-1.

    Returns (macro, per-class F1, degenerate mask) where degenerate marks
    classes with neither true nor predicted members; they score 0.
    """
    t = np.asarray(y_true).ravel()
    p = np.asarray(y_pred).ravel()
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_labels):
            raise ValueError(f"labels must lie in [0, {n_labels})")
    f1 = np.zeros(n_labels)
    degenerate = np.zeros(n_labels, dtype=bool)
    for c in range(n_labels):
        tp = np.sum((t == c) & (p == c))
        fp = np.sum((t != c) & (p == c))
        fn = np.sum((t == c) & (p != c))
        if tp + fp + fn == 0:
            degenerate[c] = True
            continue
        f1[c] = 2 * tp / (2 * tp + fp + fn)
    return float(f1.mean()), f1, degenerate


def closed_set_accuracy(y_true, y_pred) -> float:
    t = np.asarray(y_true).ravel()
    p = np.asarray(y_pred).ravel()
    if t.size == 0:
        raise ValueError("no samples")
    return float(np.mean(t == p))


@dataclass
class MetricsReport:
    auroc: float
    macro_f1: float
    closed_set_accuracy: float
    per_class_f1: list[float]
    n_known: int
    n_unknown: int
    degenerate_classes: list[int] = field(default_factory=list)  # never true and never predicted
    zero_support_classes: list[int] = field(default_factory=list)  # never true
    detector: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
