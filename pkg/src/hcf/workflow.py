"""Glue shared by the command line and the experiment harness.

A series is split into a training prefix and a held-out suffix. The scaler
and the absolute-time anchor come from the prefix only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, RawEvents, RawSeries, Scaler, WindowDataset, build_dataset, fit_scaler
from .forecast import ForecastEnsemble, forecast, rolling_starts
from .metrics import EvalReport, evaluate
from .model import HybridForecaster
from .rng import Stream


@dataclass
class Prepared:
    dataset: WindowDataset
    scaler: Scaler
    anchor: tuple[np.datetime64, np.datetime64]
    train_end: int  # first held-out index


def split_point(n_points: int, holdout: int, T_past: int, tau: int) -> int:
    train_end = n_points - holdout
    if holdout < 0 or train_end < T_past + tau:
        raise DataError(
            f"holdout of {holdout} leaves {train_end} training points; need at least {T_past + tau}"
        )
    return train_end


def prepare(series: RawSeries, events: RawEvents | None, T_past: int, tau: int, holdout: int,
            n_types: int | None = None, scaler: Scaler | None = None, anchor=None) -> Prepared:
    """Fit (or reuse) scaling and build the windowed dataset over the whole series."""
    train_end = split_point(series.length, holdout, T_past, tau)
    if scaler is None:
        scaler = fit_scaler(series, (0, train_end))
    if anchor is None:
        anchor = (series.timestamps[0], series.timestamps[train_end - 1])
    ds = build_dataset(series, events, scaler, anchor, T_past, tau, n_types)
    return Prepared(ds, scaler, anchor, train_end)


def rolling_forecasts(model: HybridForecaster, prep: Prepared, n_samples: int, rng: Stream,
                      stride: int | None = None, **flags) -> list[ForecastEnsemble]:
    """Forecasts at origins stepping through the held-out suffix.

    The window starting at ``s`` draws from ``rng.split("origin", s)``, so a
    forecast does not depend on which other origins are run alongside it.
    """
    cfg = model.config
    starts = rolling_starts(prep.train_end, prep.dataset.n_points, cfg.T_past, cfg.tau, stride)
    if not starts:
        raise DataError("held-out range is shorter than one forecast horizon")
    return [
        forecast(model, prep.dataset, s, n_samples, rng.split("origin", s), prep.scaler, **flags)
        for s in starts
    ]


def score(ensembles: list[ForecastEnsemble], series: RawSeries, T_past: int) -> EvalReport:
    """Score rolling forecasts against the raw series values."""
    truths = []
    for e in ensembles:
        lo = e.start + T_past
        truths.append(series.values[lo:lo + e.samples.shape[1]])
    return evaluate([e.samples for e in ensembles], truths, series.variable_names)
