"""Tidy CSV emitters for loss curves, dispatch overlays and SCP traces.

Every file has one row per point.  Loss and SCP files use
``series,x,y`` columns; dispatch overlays use ``sample,t,price,true,predicted``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .train import TrainReport, net_dispatch


def _writer(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh)


def loss_rows(report: TrainReport):
    """``(series, epoch, value)`` rows: one ``train`` row per epoch and the test checkpoints."""
    rows = [("train", e + 1, float(v)) for e, v in enumerate(report.train_loss)]
    rows += [("test", int(e), float(v)) for e, v in report.test_mse]
    return rows


def export_loss(report: TrainReport, path) -> Path:
    fh, w = _writer(path)
    with fh:
        w.writerow(["series", "x", "y"])
        w.writerows(loss_rows(report))
    return Path(path)


def export_dispatch(prices, observed, predicted, path) -> Path:
    """Net dispatch overlay (charging positive) for each sample and step."""
    prices = np.atleast_2d(prices)
    obs, pred = net_dispatch(observed), net_dispatch(predicted)
    fh, w = _writer(path)
    with fh:
        w.writerow(["sample", "t", "price", "true", "predicted"])
        for i in range(prices.shape[0]):
            for t in range(prices.shape[1]):
                w.writerow([i, t, repr(float(prices[i, t])), repr(float(obs[i, t])), repr(float(pred[i, t]))])
    return Path(path)


def export_scp(traces, path) -> Path:
    """Normalized SCP objective ``c(y_k) / c(y_0)`` per sample (series) and iteration."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["series", "x", "y", "objective"])
        for i, tr in enumerate(traces):
            for k, (norm, obj) in enumerate(zip(tr.normalized, tr.objectives)):
                w.writerow([f"sample_{i}", k, repr(float(norm)), repr(float(obj))])
    return Path(path)
