"""Comparison-table emission for ablation grids: CSV plus a markdown mirror,
deterministic column and row order, per-method mean and std rows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

METRIC_COLUMNS = ("R@1@0.5", "R@1@0.7", "R@5@0.5", "R@5@0.7")
ABSENT = "absent"


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: dict[str, float]   # keyed by METRIC_COLUMNS entries


def _fmt(value) -> str:
    if value is None:
        return ABSENT
    return f"{value:.2f}"


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def build_rows(results: list[RunResult], methods: list[str], seeds: list[int]) -> tuple[list[list[str]], bool]:
    """Rows in declared grid order plus mean/std rows per method; the flag is
    False when any declared cell is missing (rendered as 'absent')."""
    by_key = {(r.method, r.seed): r for r in results}
    rows: list[list[str]] = []
    complete = True
    for method in methods:
        per_metric: dict[str, list[float]] = {m: [] for m in METRIC_COLUMNS}
        for seed in seeds:
            result = by_key.get((method, seed))
            if result is None:
                rows.append([method, str(seed)] + [ABSENT] * len(METRIC_COLUMNS))
                complete = False
                continue
            row = [method, str(seed)]
            for metric in METRIC_COLUMNS:
                value = result.metrics.get(metric)
                if value is None:
                    complete = False
                else:
                    per_metric[metric].append(value)
                row.append(_fmt(value))
            rows.append(row)
        for stat in ("mean", "std"):
            row = [method, stat]
            for metric in METRIC_COLUMNS:
                values = per_metric[metric]
                if len(values) != len(seeds):
                    row.append(ABSENT)
                else:
                    mean, std = _mean_std(values)
                    row.append(_fmt(mean if stat == "mean" else std))
            rows.append(row)
    return rows, complete


def emit_report(results: list[RunResult], methods: list[str], seeds: list[int],
                csv_path, md_path) -> bool:
    """Write the CSV and markdown tables; returns True when the grid was
    complete. Emission is byte-deterministic for identical inputs."""
    rows, complete = build_rows(results, methods, seeds)
    header = ["method", "seed", *METRIC_COLUMNS]
    csv_path, md_path = Path(csv_path), Path(md_path)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "|".join(["---"] * len(header)) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(row) + " |\n")
    return complete


def history_csv(path, history) -> None:
    """Per-epoch training metrics log."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage,epoch,loss_total,loss_loc,loss_match,loss_quality,val_r1_at_0.5\n")
        for rec in history:
            fh.write(
                f"{rec.stage},{rec.epoch},{rec.loss_total:.6f},{rec.loss_loc:.6f},"
                f"{rec.loss_match:.6f},{rec.loss_quality:.6f},{rec.val_recall:.4f}\n"
            )
