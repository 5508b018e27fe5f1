"""Metrics, the historical-average baseline, and chronological evaluation walks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import LengthMismatch
from .events import (EventBatch, NodeCatalog, TransactionEvent, batch_by_cap,
                     batch_by_window, build_od_matrix, default_t0, od_matrix_series)
from .model import HyperParams, MemoryBank, ModelParams, predict_od, step
from .multilevel import RelationTensors

if TYPE_CHECKING:
    from .training import Splits

DAY_SECONDS = 86400.0


@dataclass
class MetricReport:
    """MAE/RMSE/PCC over flattened (window, origin, destination) cells.

    ``pcc`` is None (with ``pcc_degenerate`` set) when either flattened
    vector is constant, rather than silently zero.
    """

    scope: str
    mae: float
    rmse: float
    pcc: float | None
    windows: int
    cells: int
    pcc_degenerate: bool = False

    def to_json_dict(self) -> dict:
        return {"scope": self.scope, "mae": self.mae, "rmse": self.rmse,
                "pcc": self.pcc, "windows": self.windows, "cells": self.cells}


def compute_metrics(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                    scope: str = "all_pairs",
                    demand_threshold: float | None = None) -> MetricReport:
    """Flatten prediction/truth sequences and compare.

    Scope ``above_average`` keeps only cells whose TRUE demand exceeds the
    average demand over every cell of the truth sequence (or an explicit
    ``demand_threshold``).
    """
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    for k, (p, t) in enumerate(zip(preds, truths)):
        if np.shape(p) != np.shape(t):
            raise LengthMismatch(f"window {k}: prediction {np.shape(p)} vs truth {np.shape(t)}")
    if scope not in ("all_pairs", "above_average"):
        raise ValueError(f"unknown scope {scope!r}")
    if not preds:
        return MetricReport(scope, math.nan, math.nan, None, 0, 0, pcc_degenerate=True)

    yhat = np.concatenate([np.asarray(p, dtype=float).ravel() for p in preds])
    y = np.concatenate([np.asarray(t, dtype=float).ravel() for t in truths])
    if scope == "above_average":
        threshold = float(y.mean()) if demand_threshold is None else demand_threshold
        keep = y > threshold
        y, yhat = y[keep], yhat[keep]

    cells = y.size
    if cells == 0:
        return MetricReport(scope, math.nan, math.nan, None, len(preds), 0,
                            pcc_degenerate=True)
    err = y - yhat
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    sy, syh = float(y.std()), float(yhat.std())
    if sy == 0.0 or syh == 0.0:
        return MetricReport(scope, mae, rmse, None, len(preds), cells, pcc_degenerate=True)
    pcc = float(((y - y.mean()) * (yhat - yhat.mean())).mean() / (sy * syh))
    return MetricReport(scope, mae, rmse, pcc, len(preds), cells)


class HistoricalAverage:
    """Per time-of-day-slot mean of the training OD matrices.

    A test window's slot is its start time modulo one day, quantized by tau.
    Slots never seen in training fall back to the global mean matrix and are
    recorded in ``unseen_slots``.
    """

    def __init__(self, slot_means: dict[int, np.ndarray], global_mean: np.ndarray,
                 tau: float):
        self.slot_means = slot_means
        self.global_mean = global_mean
        self.tau = tau
        self.unseen_slots: list[int] = []

    def slot_of(self, window_start: float) -> int:
        return int(math.floor(((window_start % DAY_SECONDS) + 1e-9) / self.tau))

    def predict(self, window_start: float) -> np.ndarray:
        slot = self.slot_of(window_start)
        mean = self.slot_means.get(slot)
        if mean is None:
            self.unseen_slots.append(slot)
            return self.global_mean.copy()
        return mean.copy()


def ha_baseline(train_truths: Sequence[tuple[float, np.ndarray]], tau: float) -> HistoricalAverage:
    """Fit the historical-average predictor from (window_start, matrix) pairs."""
    if not train_truths:
        raise LengthMismatch("historical average needs at least one training window")
    grouped: dict[int, list[np.ndarray]] = {}
    probe = HistoricalAverage({}, np.zeros_like(np.asarray(train_truths[0][1])), tau)
    for window_start, matrix in train_truths:
        grouped.setdefault(probe.slot_of(window_start), []).append(np.asarray(matrix, dtype=float))
    slot_means = {slot: np.mean(mats, axis=0) for slot, mats in grouped.items()}
    global_mean = np.mean([m for _, m in train_truths], axis=0)
    return HistoricalAverage(slot_means, global_mean, tau)


@dataclass
class WindowPrediction:
    window_start: float
    window_end: float
    predicted: np.ndarray
    actual: np.ndarray | None


@dataclass
class EvalResult:
    all_pairs: MetricReport
    above_average: MetricReport
    predictions: list[WindowPrediction]


def evaluate(params: ModelParams, events: Sequence[TransactionEvent], catalog: NodeCatalog,
             hyper: HyperParams, splits: "Splits", t0: float | None = None) -> EvalResult:
    """Chronological walk over train+validation+test, reporting on test targets.

    Memories carry over between the phases exactly as a deployed system
    would run; no parameters are updated anywhere.
    """
    tau = hyper.tau
    if t0 is None:
        t0 = default_t0(events, tau)
    total = splits.total
    horizon = t0 + total * tau
    visible = [ev for ev in events if t0 <= ev.timestamp < horizon]
    batches = batch_by_window(visible, t0, tau, until=horizon)
    first_test = splits.train_windows + splits.val_windows

    truths = od_matrix_series(visible, t0, tau, total, hyper.n)
    bank = MemoryBank.initial(params, hyper, t0)
    predictions: list[WindowPrediction] = []
    for w in range(total - 1):
        result = step(bank, batches[w], params, hyper, catalog)
        target = w + 1
        if target >= first_test:
            pred = predict_od(result.z, params)
            ws, we = t0 + target * tau, t0 + (target + 1) * tau
            predictions.append(WindowPrediction(ws, we, pred.matrix, truths[target]))

    preds = [p.predicted for p in predictions]
    truths = [p.actual for p in predictions]
    return EvalResult(
        all_pairs=compute_metrics(preds, truths, "all_pairs"),
        above_average=compute_metrics(preds, truths, "above_average"),
        predictions=predictions,
    )


def predict_walk(params: ModelParams, events: Sequence[TransactionEvent],
                 catalog: NodeCatalog, hyper: HyperParams, t0: float | None = None,
                 until: float | None = None, cap: int | None = None,
                 with_actual: bool = True) -> list[WindowPrediction]:
    """One prediction per processed batch, each for the next tau seconds.

    With ``cap`` given, busy windows are split every ``cap`` events, so
    memories advance by varied timespans and predictions densify at peak
    (each sub-batch yields a prediction for [window_end, window_end + tau)).
    """
    tau = hyper.tau
    if t0 is None:
        t0 = default_t0(events, tau)
    if cap is None:
        batches = batch_by_window(events, t0, tau, until=until)
    else:
        batches = batch_by_cap(events, t0, tau, cap, until=until)

    bank = MemoryBank.initial(params, hyper, t0)
    out: list[WindowPrediction] = []
    for batch in batches:
        result = step(bank, batch, params, hyper, catalog)
        t = batch.window_end
        actual = build_od_matrix(events, t, tau, hyper.n) if with_actual else None
        out.append(WindowPrediction(t, t + tau, predict_od(result.z, params).matrix, actual))
    return out


def final_relations(params: ModelParams, events: Sequence[TransactionEvent],
                    catalog: NodeCatalog, hyper: HyperParams,
                    t0: float | None = None) -> RelationTensors:
    """Replay the stream and return the relation tensors of the last step."""
    tau = hyper.tau
    if t0 is None:
        t0 = default_t0(events, tau)
    batches = batch_by_window(events, t0, tau)
    if not batches:
        batches = [EventBatch((), t0, t0 + tau)]
    bank = MemoryBank.initial(params, hyper, t0)
    relations = None
    for batch in batches:
        relations = step(bank, batch, params, hyper, catalog).relations
    if relations is None:
        raise ValueError("relations are not defined under the no_multilevel ablation")
    return relations


def export_representations(params: ModelParams, events: Sequence[TransactionEvent],
                           catalog: NodeCatalog, hyper: HyperParams, nodes: Sequence[int],
                           path, t0: float | None = None, until: float | None = None) -> None:
    """Dump each tracked node's representation after every batch.

    Rows are ``timestamp,node,dim,value`` with timestamp the batch end; the
    raw d-dimensional series is suitable for offline projection (PCA etc.).
    """
    tau = hyper.tau
    if t0 is None:
        t0 = default_t0(events, tau)
    batches = batch_by_window(events, t0, tau, until=until)
    bank = MemoryBank.initial(params, hyper, t0)
    for node in nodes:
        if not 0 <= node < hyper.n:
            raise ValueError(f"node {node} out of range 0..{hyper.n - 1}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp,node,dim,value\n")
        for batch in batches:
            step(bank, batch, params, hyper, catalog)
            reps = bank.station_reps()
            for node in nodes:
                for dim in range(hyper.dim):
                    fh.write(f"{batch.window_end!r},{node},{dim},"
                             f"{float(reps[node, dim])!r}\n")


def write_predictions_csv(predictions: Sequence[WindowPrediction], catalog: NodeCatalog,
                          path, include_actual: bool = True) -> None:
    """Prediction dump: ``origin,destination,window_start,window_end,predicted,actual``."""
    include_actual = include_actual and all(p.actual is not None for p in predictions)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = "origin,destination,window_start,window_end,predicted"
        fh.write(header + (",actual\n" if include_actual else "\n"))
        for p in predictions:
            n = p.predicted.shape[0]
            for i in range(n):
                for j in range(n):
                    row = (f"{catalog.name_of(i)},{catalog.name_of(j)},"
                           f"{p.window_start!r},{p.window_end!r},"
                           f"{float(p.predicted[i, j])!r}")
                    if include_actual:
                        row += f",{float(p.actual[i, j])!r}"
                    fh.write(row + "\n")
