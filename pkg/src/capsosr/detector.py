"""Unknown detection: distance thresholding and per-class latent Gaussian densities.

Labels are 0-based; ``UNKNOWN`` is encoded as ``K`` (the (K+1)-th class).
Everything here works on numpy arrays and is independent of torch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DISTANCE = "distance_threshold"
DENSITY = "density_fit"
DENSITY_CLASSIFIERS = ("max_logdensity", "min_kl")

FIT_VAR_FLOOR = 1e-6
DEFAULT_RETENTION = 0.95


class CalibrationError(RuntimeError):
    pass


@dataclass
class OpenSetPrediction:
    decision: np.ndarray  # [N] in 0..K, K = unknown
    knownness: np.ndarray  # [N], higher = more known
    distances: np.ndarray  # [N, K]
    detector_used: str


@dataclass
class ClassGaussianFit:
    means: np.ndarray  # [K, D]
    variances: np.ndarray  # [K, D]
    counts: np.ndarray  # [K]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassGaussianFit":
        return cls(np.asarray(d["means"], float), np.asarray(d["variances"], float), np.asarray(d["counts"], int))


@dataclass
class Thresholds:
    tau: float | None = None  # distance mode, on knownness scores
    tau_per_class: list[float] | None = None  # density mode, on own-class log-densities
    tau_l2: float | None = None  # density mode fallback, on centroid distance
    retention: float = DEFAULT_RETENTION
    report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "tau_per_class": self.tau_per_class,
            "tau_l2": self.tau_l2,
            "retention": self.retention,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(**d)


def knownness_score(distances: np.ndarray) -> np.ndarray:
    """Negated minimum distance along the last axis."""
    distances = np.asarray(distances, dtype=float)
    if distances.size == 0 or distances.shape[-1] == 0:
        raise ValueError("empty distance vector")
    return -distances.min(axis=-1)


def calibrate_threshold(scores, retention: float = DEFAULT_RETENTION) -> float:
    """Threshold accepting ``score >= tau`` that rejects at most floor((1 - retention) n) scores."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 < retention <= 1.0:
        raise ValueError("retention must lie in (0, 1]")
    # small slack so that e.g. (1 - 0.95) * 20 lands on 1, not 0.99999
    k = int(math.floor((1.0 - retention) * s.size + 1e-9))
    return float(s[min(k, s.size - 1)])


def predict_open_set(distances: np.ndarray, thresholds: Thresholds) -> OpenSetPrediction:
    """Reject when the nearest target is farther than the calibrated threshold; else argmin."""
    if thresholds is None or thresholds.tau is None:
        raise CalibrationError("distance threshold not calibrated")
    distances = np.atleast_2d(np.asarray(distances, dtype=float))
    K = distances.shape[1]
    score = knownness_score(distances)
    decision = np.where(score < thresholds.tau, K, distances.argmin(axis=1))
    return OpenSetPrediction(decision, score, distances, DISTANCE)


def fit_class_gaussians(latents: np.ndarray, labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> ClassGaussianFit:
    """Per-class mean and unbiased variance over correctly classified samples only."""
    latents = np.asarray(latents, dtype=float).reshape(len(latents), -1)
    labels = np.asarray(labels)
    correct = labels == np.asarray(predictions)
    D = latents.shape[1]
    means = np.zeros((n_classes, D))
    variances = np.zeros((n_classes, D))
    counts = np.zeros(n_classes, dtype=int)
    for k in range(n_classes):
        members = latents[correct & (labels == k)]
        if len(members) < 2:
            raise CalibrationError(f"class {k} has {len(members)} correctly classified samples; need at least 2")
        means[k] = members.mean(axis=0)
        variances[k] = members.var(axis=0, ddof=1)
        counts[k] = len(members)
    return ClassGaussianFit(means, np.maximum(variances, FIT_VAR_FLOOR), counts)


def class_log_densities(latents: np.ndarray, fit: ClassGaussianFit) -> np.ndarray:
    """log N(z; u_k, diag(m_k)) for every sample and class: [N, K]."""
    z = np.atleast_2d(np.asarray(latents, dtype=float).reshape(len(np.atleast_1d(latents)), -1))
    diff = z[:, None, :] - fit.means[None]
    var = fit.variances[None]
    D = fit.means.shape[1]
    return -0.5 * (D * math.log(2 * math.pi) + np.log(var).sum(-1) + (diff**2 / var).sum(-1))


def centroid_distances(latents: np.ndarray, fit: ClassGaussianFit) -> np.ndarray:
    z = np.atleast_2d(np.asarray(latents, dtype=float).reshape(len(np.atleast_1d(latents)), -1))
    return np.linalg.norm(z[:, None, :] - fit.means[None], axis=-1)


def density_predict(
    latents: np.ndarray,
    fit: ClassGaussianFit,
    thresholds: Thresholds,
    target_distances: np.ndarray | None = None,
    classifier: str = "max_logdensity",
) -> OpenSetPrediction:
    """Unknown if every class log-density is below its threshold or the nearest centroid is too far.

    Known samples take the class of maximal log-density, or with
    ``classifier="min_kl"`` the class of the nearest target (needs ``target_distances``).
    """
    if thresholds is None or thresholds.tau_per_class is None or thresholds.tau_l2 is None:
        raise CalibrationError("density thresholds not calibrated")
    if classifier not in DENSITY_CLASSIFIERS:
        raise ValueError(f"unknown density classifier {classifier!r}")
    logp = class_log_densities(latents, fit)
    K = logp.shape[1]
    below = (logp < np.asarray(thresholds.tau_per_class)[None]).all(axis=1)
    too_far = centroid_distances(latents, fit).min(axis=1) > thresholds.tau_l2
    if classifier == "min_kl":
        if target_distances is None:
            raise ValueError("min_kl classification needs target distances")
        known_class = np.asarray(target_distances).argmin(axis=1)
    else:
        known_class = logp.argmax(axis=1)
    decision = np.where(below | too_far, K, known_class)
    # distances reported as negated log-densities so that lower = closer in both modes
    return OpenSetPrediction(decision, logp.max(axis=1), -logp, DENSITY)


def calibrate_density(latents: np.ndarray, labels: np.ndarray, fit: ClassGaussianFit, retention: float = DEFAULT_RETENTION) -> tuple[list[float], float]:
    """Per-class log-density thresholds and the centroid-distance fallback threshold."""
    labels = np.asarray(labels)
    logp = class_log_densities(latents, fit)
    taus = []
    for k in range(fit.means.shape[0]):
        own = logp[labels == k, k]
        if own.size == 0:
            raise CalibrationError(f"class {k} has no calibration samples")
        taus.append(calibrate_threshold(own, retention))
    own_dist = centroid_distances(latents, fit)[np.arange(len(labels)), labels]
    tau_l2 = -calibrate_threshold(-own_dist, retention)
    return taus, tau_l2


def retention_report(scores, tau: float, retention: float) -> dict:
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    rejected = int((scores < tau).sum())
    return {
        "n": n,
        "tau": tau,
        "retention_target": retention,
        "accepted_fraction": (n - rejected) / n,
        "rejected": rejected,
        "max_rejected": int(math.floor((1.0 - retention) * n + 1e-9)),
    }
