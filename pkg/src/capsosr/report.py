"""Figures and delimited tables from run artifacts.

Inputs are the files the other subcommands write: the per-sample scores CSV
from evaluation, the JSONL training log and an ablation TSV. Every figure is
written next to a CSV holding exactly the numbers it plots.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ablation import read_table  # noqa: E402
from .experiment import read_scores  # noqa: E402
from .protocol import auroc  # noqa: E402
from .training import read_log  # noqa: E402


def roc_curve(known_scores, unknown_scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) with knowns as positives, one point per distinct score, from (0, 0) to (1, 1)."""
    k = np.asarray(known_scores, dtype=float)
    u = np.asarray(unknown_scores, dtype=float)
    thresholds = np.unique(np.concatenate([k, u]))[::-1]
    tpr = np.concatenate([[0.0], [(k >= t).mean() for t in thresholds]])
    fpr = np.concatenate([[0.0], [(u >= t).mean() for t in thresholds]])
    return fpr, tpr


def trapezoid_area(x, y) -> float:
    x, y = np.asarray(x), np.asarray(y)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_scores(scores_path, out_dir: Path) -> dict:
    s = read_scores(scores_path)
    K = int(s["label"].max())
    dist_cols = [c for c in s if c.startswith("dist_")]
    if dist_cols:
        K = len(dist_cols)
    known = s["label"] < K
    out = {}

    fpr, tpr = roc_curve(s["score"][known], s["score"][~known])
    _write_csv(out_dir / "roc.csv", ["fpr", "tpr"], zip(fpr.tolist(), tpr.tolist()))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set(xlabel="false positive rate (unknowns accepted)", ylabel="true positive rate (knowns accepted)")
    out["roc"] = _save(fig, out_dir / "roc.png")
    out["auroc"] = auroc(s["score"][known], s["score"][~known])
    out["roc_area"] = trapezoid_area(fpr, tpr)

    edges = np.histogram_bin_edges(s["score"], bins=30)
    hk, _ = np.histogram(s["score"][known], edges)
    hu, _ = np.histogram(s["score"][~known], edges)
    _write_csv(out_dir / "score_hist.csv", ["bin_lo", "bin_hi", "known", "unknown"],
               zip(edges[:-1].tolist(), edges[1:].tolist(), hk.tolist(), hu.tolist()))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.stairs(hk, edges, label="known", fill=True, alpha=0.5)
    ax.stairs(hu, edges, label="unknown", fill=True, alpha=0.5)
    ax.set(xlabel="score", ylabel="count")
    ax.legend()
    out["score_hist"] = _save(fig, out_dir / "score_hist.png")

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label in np.unique(s["label"]):
        m = s["label"] == label
        name = "unknown" if label == K else f"class {label}"
        ax.scatter(s["embed_x"][m], s["embed_y"][m], s=4, label=name, c="k" if label == K else None)
    ax.set(xlabel="pc 1", ylabel="pc 2")
    ax.legend(fontsize=6, markerscale=2)
    out["embedding"] = _save(fig, out_dir / "embedding.png")
    _write_csv(out_dir / "embedding.csv", ["label", "embed_x", "embed_y"],
               zip(s["label"].tolist(), s["embed_x"].tolist(), s["embed_y"].tolist()))
    return out


def plot_log(log_path, out_dir: Path) -> dict:
    records = read_log(log_path)
    steps = [r for r in records if r.get("event") == "step"]
    epochs = [r for r in records if r.get("event") == "epoch"]
    out = {}
    if steps:
        keys = ["total", "kl_term", "contrastive_term", "reconstruction_term"]
        _write_csv(out_dir / "loss.csv", ["step"] + keys, [[r["step"]] + [r[k] for k in keys] for r in steps])
        fig, ax = plt.subplots(figsize=(5, 3))
        x = [r["step"] for r in steps]
        for k in keys:
            ax.plot(x, [r[k] for r in steps], lw=0.8, label=k)
        ax.set(xlabel="step", ylabel="loss", yscale="symlog")
        ax.legend(fontsize=7)
        out["loss"] = _save(fig, out_dir / "loss.png")
    if epochs:
        _write_csv(out_dir / "target_distance.csv", ["step", "min_pairwise_target_distance"],
                   [[r["step"], r["min_pairwise_target_distance"]] for r in epochs])
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([r["step"] for r in epochs], [r["min_pairwise_target_distance"] for r in epochs], marker="o")
        ax.set(xlabel="step", ylabel="min pairwise target distance")
        out["target_distance"] = _save(fig, out_dir / "target_distance.png")
    return out


def plot_ablation(table_path, out_dir: Path) -> dict:
    table = read_table(table_path)
    grid = np.array([[table.value(r, c) for c in table.col_labels] for r in table.row_labels])
    fig, ax = plt.subplots(figsize=(1.5 + 1.3 * len(table.col_labels), 1 + 0.6 * len(table.row_labels)))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xticks(range(len(table.col_labels)), table.col_labels, fontsize=8)
    ax.set_yticks(range(len(table.row_labels)), table.row_labels, fontsize=8)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="AUROC")
    return {"ablation": _save(fig, out_dir / "ablation.png")}


def make_report(out_dir, scores=None, log=None, ablation=None) -> dict:
    """Render whichever artifacts are given; returns {name: path or value}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if scores is None and log is None and ablation is None:
        raise ValueError("nothing to report: pass scores, log or ablation")
    out = {}
    if scores is not None:
        out.update(plot_scores(scores, out_dir))
    if log is not None:
        out.update(plot_log(log, out_dir))
    if ablation is not None:
        out.update(plot_ablation(ablation, out_dir))
    summary = {k: v for k, v in out.items() if isinstance(v, float)}
    if summary:
        _write_csv(out_dir / "summary.csv", ["metric", "value"], [[k, repr(v)] for k, v in sorted(summary.items())])
    return out
