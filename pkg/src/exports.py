"""
CSV writers for every numeric export.

Floats are written with 17 significant digits so that reading a file back reproduces the values
exactly. Rows are written in the order given; nothing here sorts or reorders.
"""

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from src.ot_core import TransportPlan
from src.survival_stats import SurvivalCurve


def format_value(value) -> str:
    """Render one CSV cell: 17 significant digits for floats, 'nan' for missing values."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return format(value, ".17g")
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(cell) for cell in row])
    return buffer.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def plan_rows(plan: TransportPlan) -> list:
    """(row, column, mass) triples over the real tokens."""
    mass = plan.mass
    return [(i, j, mass[i, j]) for i in range(mass.shape[0]) for j in range(mass.shape[1])]


def write_history(path, history) -> None:
    write_csv(path, ("epoch", "train_loss", "rho", "val_cindex"),
              ((r.epoch, r.train_loss, r.rho, r.val_cindex) for r in history))


def write_km_curve(path, curve: SurvivalCurve) -> None:
    write_csv(path, ("time", "survival", "at_risk", "events"),
              zip(curve.time_points, curve.survival, curve.at_risk, curve.observed_events))


def write_metrics(path, rows: Sequence[dict]) -> None:
    """
    Per-fold metrics table.

    Args:
        path: output file.
        rows (Sequence[dict]): records with fold, n_bags, c_index, chi_square, p_value,
            n_high and n_low keys.
    """
    header = ("fold", "n_bags", "c_index", "chi_square", "p_value", "n_high", "n_low")
    write_csv(path, header, ([row[key] for key in header] for row in rows))


def attention_rows(instance_ids: Sequence[str], scores: np.ndarray) -> list:
    """Instances sorted by descending attention; ties keep instance order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [(instance_ids[i], scores[i]) for i in order]


def write_attention(path, instance_ids: Sequence[str], scores: np.ndarray) -> None:
    write_csv(path, ("instance_id", "attention"), attention_rows(instance_ids, scores))
