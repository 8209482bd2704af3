"""Ablation grids: one trained, calibrated and evaluated model per table cell."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .training import OpenSetData, prepare_data

log = logging.getLogger(__name__)


@dataclass
class AblationGrid:
    """Rows and columns are (label, config overrides); a cell applies both."""

    name: str
    rows: list[tuple[str, dict]]
    cols: list[tuple[str, dict]]

    def cells(self):
        for row_label, row in self.rows:
            for col_label, col in self.cols:
                overlap = row.keys() & col.keys()
                if overlap:
                    raise ValueError(f"row and column both set {sorted(overlap)}")
                yield row_label, col_label, {**row, **col}


def _axis(key: str, label: str, values) -> list[tuple[str, dict]]:
    return [(f"{label}={float(v)}", {key: float(v)}) for v in values]


GRIDS = {
    "alpha_mk": AblationGrid(
        "alpha_mk", _axis("alpha", "alpha", [0.5, 1.0, 2.0]), _axis("margin", "m_k", [5.0, 10.0, 20.0])
    ),
    "architecture": AblationGrid(
        "architecture",
        [
            ("capsules+routing", {}),
            ("capsules, no routing", {"routing_iterations": 1}),
            ("affine head", {"capsule_layer": "fc"}),
        ],
        [("targets=fixed", {"target_mode": "fixed"}), ("targets=learnable", {"target_mode": "learnable"})],
    ),
}


def single_cell_grid(config_overrides: dict | None = None) -> AblationGrid:
    return AblationGrid("single", [("base", dict(config_overrides or {}))], [("auroc", {})])


@dataclass
class AblationTable:
    grid: str
    row_labels: list[str]
    col_labels: list[str]
    auroc: dict[tuple[str, str], float]
    details: dict[tuple[str, str], dict] = field(default_factory=dict)

    def value(self, row: str, col: str) -> float:
        return self.auroc[(row, col)]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow([self.grid] + self.col_labels)
        for r in self.row_labels:
            w.writerow([r] + [_fmt(self.auroc[(r, c)]) for c in self.col_labels])
        return buf.getvalue()

    def details_json(self) -> str:
        cells = [{"row": r, "col": c, **self.details[(r, c)]} for r in self.row_labels for c in self.col_labels]
        return json.dumps({"grid": self.grid, "cells": cells}, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        path.with_suffix(".json").write_text(self.details_json())
        return path


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def read_table(path) -> AblationTable:
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    grid, col_labels = rows[0][0], rows[0][1:]
    values = {}
    for row in rows[1:]:
        for c, v in zip(col_labels, row[1:]):
            values[(row[0], c)] = float(v)
    return AblationTable(grid, [r[0] for r in rows[1:]], col_labels, values)


def run_ablation(
    grid: AblationGrid | str,
    base: ExperimentConfig,
    data: OpenSetData | None = None,
    log_dir=None,
) -> AblationTable:
    """Train, calibrate and evaluate every cell on the same data and seeds."""
    from .experiment import run_experiment

    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ValueError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
        grid = GRIDS[grid]
    if data is None:
        data = prepare_data(base)
    values, details = {}, {}
    for i, (r, c, overrides) in enumerate(grid.cells()):
        config = base.replace(**overrides)
        log_path = None
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(log_dir) / f"{grid.name}_cell{i}.jsonl"
        ckpt, report = run_experiment(config, data, log_path=log_path)
        log.info("%s | %s: AUROC %.4f", r, c, report.auroc)
        values[(r, c)] = report.auroc
        details[(r, c)] = {
            "overrides": overrides,
            "auroc": report.auroc,
            "macro_f1": report.macro_f1,
            "closed_set_accuracy": report.closed_set_accuracy,
            "final_loss": ckpt.last_loss,
        }
    return AblationTable(grid.name, [r for r, _ in grid.rows], [c for c, _ in grid.cols], values, details)
