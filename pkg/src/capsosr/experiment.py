"""Calibration and open-set evaluation of a trained checkpoint."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .detector import (
    DENSITY,
    DISTANCE,
    CalibrationError,
    Thresholds,
    calibrate_density,
    calibrate_threshold,
    class_log_densities,
    density_predict,
    fit_class_gaussians,
    knownness_score,
    predict_open_set,
    retention_report,
)
from .protocol import MetricsReport, auroc, closed_set_accuracy, macro_f1
from .training import OpenSetData


@dataclass
class Inference:
    distances: np.ndarray  # [N, K]
    probs: np.ndarray  # [N, K]
    latents: np.ndarray  # [N, K * d], posterior means
    y_pred: np.ndarray  # [N]


@torch.no_grad()
def infer(ckpt: Checkpoint, x: np.ndarray, batch_size: int = 256) -> Inference:
    model = ckpt.model.eval()
    dtype = next(model.parameters()).dtype
    parts = []
    for start in range(0, len(x), batch_size):
        out = model(torch.as_tensor(x[start : start + batch_size], dtype=dtype), reconstruct=False)
        parts.append((out.distances, out.probs, out.dist.mu.flatten(1), out.y_pred))
    cat = [torch.cat(p).double().numpy() for p in zip(*parts)]
    return Inference(cat[0], cat[1], cat[2], cat[3].astype(np.int64))


def calibrate(ckpt: Checkpoint, data: OpenSetData, report_path=None) -> Checkpoint:
    """Fit both detectors: the distance threshold and the per-class latent Gaussians.

    Thresholds come from correctly classified samples of the held-out
    calibration slice (the training slice itself when none was held out);
    the Gaussians are fitted on correctly classified training samples.
    """
    retention = ckpt.config.retention
    cal_x, cal_y = (data.calib_x, data.calib_y) if len(data.calib_y) else (data.train_x, data.train_y)
    cal = infer(ckpt, cal_x)
    correct = cal.y_pred == cal_y
    if not correct.any():
        raise CalibrationError("no correctly classified calibration samples")
    scores = knownness_score(cal.distances[correct])
    tau = calibrate_threshold(scores, retention)

    fit_inf = infer(ckpt, data.train_x)
    fit = fit_class_gaussians(fit_inf.latents, data.train_y, fit_inf.y_pred, data.n_classes)
    taus, tau_l2 = calibrate_density(cal.latents[correct], cal_y[correct], fit, retention)

    report = {
        "distance": retention_report(scores, tau, retention),
        "density_per_class": [
            retention_report(class_log_densities(cal.latents[correct & (cal_y == k)], fit)[:, k], taus[k], retention)
            for k in range(data.n_classes)
        ],
        "calibration_samples": int(len(cal_y)),
        "correctly_classified": int(correct.sum()),
        "tau_l2": tau_l2,
    }
    ckpt.thresholds = Thresholds(tau=tau, tau_per_class=taus, tau_l2=tau_l2, retention=retention, report=report)
    ckpt.class_fit = fit
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return ckpt


def _pca2(latents: np.ndarray) -> np.ndarray:
    centered = latents - latents.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def evaluate(ckpt: Checkpoint, data: OpenSetData, scores_path=None, report_path=None) -> MetricsReport:
    """AUROC on threshold-free scores and macro-F1 over K+1 classes with the calibrated detector."""
    config = ckpt.config
    K = ckpt.n_classes
    if data.n_classes != K:
        raise ValueError(f"data has {data.n_classes} known classes but the checkpoint {K}")
    if ckpt.thresholds is None:
        raise CalibrationError("checkpoint is not calibrated")
    inf = infer(ckpt, data.test_x)
    if config.detector == DENSITY:
        pred = density_predict(inf.latents, ckpt.class_fit, ckpt.thresholds, inf.distances, config.density_classifier)
    else:
        pred = predict_open_set(inf.distances, ckpt.thresholds)

    if config.score == "max_softmax":
        score = inf.probs.max(axis=1)
    elif config.score == "max_logdensity":
        score = class_log_densities(inf.latents, ckpt.class_fit).max(axis=1)
    else:
        score = knownness_score(inf.distances)

    known = data.test_y < K
    n_known, n_unknown = int(known.sum()), int((~known).sum())
    auc = auroc(score[known], score[~known]) if n_known and n_unknown else math.nan
    macro, per_class, degenerate = macro_f1(data.test_y, pred.decision, K + 1)
    acc = closed_set_accuracy(data.test_y[known], inf.distances[known].argmin(axis=1)) if n_known else math.nan
    report = MetricsReport(
        auroc=auc,
        macro_f1=macro,
        closed_set_accuracy=acc,
        per_class_f1=per_class.tolist(),
        n_known=n_known,
        n_unknown=n_unknown,
        degenerate_classes=np.flatnonzero(degenerate).tolist(),
        zero_support_classes=[c for c in range(K + 1) if not np.any(data.test_y == c)],
        detector=pred.detector_used,
        extra={"score": config.score, "loss_mode": config.loss_mode, "target_mode": config.target_mode},
    )
    if scores_path is not None:
        write_scores(scores_path, data.test_y, pred.decision, score, inf.distances, _pca2(inf.latents))
    if report_path is not None:
        with open(report_path, "a") as f:
            f.write(report.to_json() + "\n")
    return report


def write_scores(path, labels, decisions, scores, distances, embedding) -> Path:
    """Per-sample CSV: label, decision, score, 2-D embedding, distance to every target."""
    path = Path(path)
    K = distances.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label", "decision", "score", "embed_x", "embed_y"] + [f"dist_{k}" for k in range(K)])
        for i in range(len(labels)):
            w.writerow(
                [i, int(labels[i]), int(decisions[i]), repr(float(scores[i])), repr(float(embedding[i, 0])),
                 repr(float(embedding[i, 1]))] + [repr(float(v)) for v in distances[i]]
            )
    return path


def read_scores(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = rows[0].keys() if rows else []
    out = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    for c in ("index", "label", "decision"):
        if c in out:
            out[c] = out[c].astype(np.int64)
    return out


def run_experiment(config, data: OpenSetData | None = None, log_path=None) -> tuple[Checkpoint, MetricsReport]:
    """train -> calibrate -> evaluate in memory."""
    from .training import prepare_data, train

    if data is None:
        data = prepare_data(config)
    ckpt = train(config, data, log_path=log_path)
    calibrate(ckpt, data)
    return ckpt, evaluate(ckpt, data)
