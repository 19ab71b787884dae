"""MSE / MAPE / R2 over denormalized predictions, plus period-wise robustness.

Metrics are computed in raw speed units: predictions come out of the models
in normalized space and are mapped back through the dataset's stored stats
before anything is scored. All (window, node, step) pairs of a range are
flattened into one vector per side, so n in each formula is that flattened
count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import ForecastWindow, SpeedDataset, denormalize, make_windows
from .errors import DataError
from .tensor import ShapeError

DEFAULT_MAPE_FLOOR = 1.0  # raw speed units


@dataclass(frozen=True)
class MetricTriple:
    mse: float
    mape: float
    r2: float

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse, "mape": self.mape, "r2": self.r2}


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"mse length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("mse needs at least one element")
    diff = pred - truth
    return float(np.mean(diff * diff))


def mape(pred, truth, floor: float = DEFAULT_MAPE_FLOOR) -> float:
    """Mean |pred - truth| / truth over terms whose truth is at least ``floor``.

    Near-zero ground-truth speeds would blow the ratio up, so such terms are
    excluded from both the sum and the count. Returns 0 with a warning when
    every term is excluded.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"mape length mismatch: {pred.shape} vs {truth.shape}")
    keep = truth >= floor
    if not keep.any():
        warnings.warn(f"all {truth.size} terms fell below the MAPE floor {floor}, returning 0")
        return 0.0
    return float(np.mean(np.abs(pred[keep] - truth[keep]) / truth[keep]))


def r2(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"r2 length mismatch: {pred.shape} vs {truth.shape}")
    if truth.size < 2:
        raise DataError("r2 needs at least two elements")
    mean = truth.mean()
    ss_tot = float(((truth - mean) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("r2 is undefined for constant ground truth")
    ss_res = float(((truth - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def _collect(
    forward: Callable[[np.ndarray], np.ndarray],
    windows: Sequence[ForecastWindow],
    stats,
) -> tuple[np.ndarray, np.ndarray]:
    preds = []
    truths = []
    for window in windows:
        pred = np.asarray(forward(window.inputs))  # N x H
        preds.append(denormalize(pred, stats).ravel())
        truths.append(denormalize(window.target.T, stats).ravel())  # align to N x H
    return np.concatenate(preds), np.concatenate(truths)


def evaluate_model(
    forward: Callable[[np.ndarray], np.ndarray],
    dataset: SpeedDataset,
    split_range: range,
    lookback: int = 12,
    horizon: int = 12,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
) -> MetricTriple:
    """Score a forward function over every window of a range, in raw units.

    ``forward`` maps a normalized L x N window to a normalized N x H
    prediction matrix (both models' native shape).
    """
    windows = make_windows(dataset, split_range, lookback, horizon)
    if not windows:
        raise DataError(
            f"range [{split_range.start}, {split_range.stop}) holds no full windows"
        )
    pred, truth = _collect(forward, windows, dataset.stats)
    return MetricTriple(mse=mse(pred, truth), mape=mape(pred, truth, mape_floor), r2=r2(pred, truth))


def evaluate_per_horizon(
    forward: Callable[[np.ndarray], np.ndarray],
    dataset: SpeedDataset,
    split_range: range,
    lookback: int = 12,
    horizon: int = 12,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
) -> list[MetricTriple]:
    """Like :func:`evaluate_model` but broken down per forecast step."""
    windows = make_windows(dataset, split_range, lookback, horizon)
    if not windows:
        raise DataError(
            f"range [{split_range.start}, {split_range.stop}) holds no full windows"
        )
    per_step_pred: list[list[np.ndarray]] = [[] for _ in range(horizon)]
    per_step_truth: list[list[np.ndarray]] = [[] for _ in range(horizon)]
    for window in windows:
        pred = denormalize(np.asarray(forward(window.inputs)), dataset.stats)
        truth = denormalize(window.target.T, dataset.stats)
        for h in range(horizon):
            per_step_pred[h].append(pred[:, h])
            per_step_truth[h].append(truth[:, h])
    out = []
    for h in range(horizon):
        p = np.concatenate(per_step_pred[h])
        t = np.concatenate(per_step_truth[h])
        out.append(MetricTriple(mse=mse(p, t), mape=mape(p, t, mape_floor), r2=r2(p, t)))
    return out


def period_ranges(n_steps: int, k: int) -> list[range]:
    """k consecutive non-overlapping periods covering [0, T), near-equal length."""
    if k < 2:
        raise DataError(f"need at least 2 periods, got {k}")
    bounds = [round(i * n_steps / k) for i in range(k + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(k)]


def periodwise_evaluate(
    forward: Callable[[np.ndarray], np.ndarray],
    dataset: SpeedDataset,
    k: int = 5,
    lookback: int = 12,
    horizon: int = 12,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
) -> list[MetricTriple | None]:
    """Evaluate the same model independently on k consecutive time periods.

    A period too short for a single window is reported as None rather than
    failing the whole sweep.
    """
    results: list[MetricTriple | None] = []
    for rng_ in period_ranges(dataset.n_steps, k):
        if len(rng_) < lookback + horizon:
            results.append(None)
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            results.append(
                evaluate_model(forward, dataset, rng_, lookback, horizon, mape_floor)
            )
    return results


def metric_variance(triples: Sequence[MetricTriple | None]) -> dict[str, float]:
    """Population variance of each metric across the non-empty periods."""
    rows = [t for t in triples if t is not None]
    if not rows:
        return {"mse": float("nan"), "mape": float("nan"), "r2": float("nan")}
    return {
        "mse": float(np.var([t.mse for t in rows])),
        "mape": float(np.var([t.mape for t in rows])),
        "r2": float(np.var([t.r2 for t in rows])),
    }
