"""Trajectory error metrics over center-format bounding boxes.

ADE/FDE are Euclidean center-point displacements (mean over all timesteps /
final timestep only). ARB/FRB work on corner-format boxes: per sample and
timestep the RMSE over the 4 corner coordinates, then the arithmetic mean
over timesteps and samples (FRB restricts to the final timestep). All
aggregation is global over the evaluated set, in fixed sample order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .representation import center_to_corner

CSV_HEADER = "dataset,horizon,ade,fde,arb,frb,n_samples"


@dataclass
class MetricsReport:
    ade: float
    fde: float
    arb: float
    frb: float
    n_samples: int
    horizon: int


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 4:
        raise ValueError(f"expected (N, n, 4) boxes, got {pred.shape}")
    if pred.shape[0] == 0:
        raise ValueError("no samples to evaluate")
    return pred, gt


def _center_dist(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    diff = pred[..., :2] - gt[..., :2]
    return np.sqrt((diff * diff).sum(axis=-1))


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    return float(_center_dist(pred, gt).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    return float(_center_dist(pred[:, -1], gt[:, -1]).mean())


def _corner_rmse(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    diff = center_to_corner(pred) - center_to_corner(gt)
    return np.sqrt((diff * diff).mean(axis=-1))


def arb(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    return float(_corner_rmse(pred, gt).mean())


def frb(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    return float(_corner_rmse(pred[:, -1], gt[:, -1]).mean())


def compute_report(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    pred, gt = _check(pred, gt)
    return MetricsReport(ade=ade(pred, gt), fde=fde(pred, gt),
                         arb=arb(pred, gt), frb=frb(pred, gt),
                         n_samples=pred.shape[0], horizon=pred.shape[1])


def format_metrics_csv(rows: list[tuple[str, MetricsReport]]) -> str:
    """One CSV row per (dataset label, report), 6 significant digits."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for dataset, r in rows:
        buf.write(f"{dataset},{r.horizon},{r.ade:.6g},{r.fde:.6g},"
                  f"{r.arb:.6g},{r.frb:.6g},{r.n_samples}\n")
    return buf.getvalue()


def write_metrics_csv(path, rows: list[tuple[str, MetricsReport]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_metrics_csv(rows))
