"""Monte-Carlo forecasting from the prior and ensemble summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Batch, Scaler, WindowDataset
from .model import HybridForecaster
from .rng import Stream

DEFAULT_LEVELS = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
DEFAULT_SAMPLES = 1000


@dataclass
class ForecastEnsemble:
    samples: np.ndarray  # (N, tau, D), original units
    mean: np.ndarray  # (tau, D)
    quantiles: dict[float, np.ndarray]  # level -> (tau, D)
    start: int = -1  # window start the forecast was made from

    @property
    def levels(self) -> list[float]:
        return sorted(self.quantiles)


def summarize(samples: np.ndarray, levels=DEFAULT_LEVELS) -> tuple[np.ndarray, dict[float, np.ndarray]]:
    """Per-cell mean and linearly interpolated empirical quantiles over axis 0."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("cannot summarise an empty ensemble")
    levels = [float(p) for p in levels]
    if any(not 0.0 < p < 1.0 for p in levels):
        raise ValueError(f"quantile levels must lie in (0, 1), got {levels}")
    q = np.quantile(samples, levels, axis=0, method="linear")
    return samples.mean(axis=0), {p: q[i] for i, p in enumerate(levels)}


def sample_trajectories(model: HybridForecaster, batch: Batch, n_samples: int, rng: Stream,
                        mean_feedback: bool = False, zero_latent_std: bool = False,
                        zero_obs_std: bool = False) -> np.ndarray:
    """Standardised sample paths (N, tau, D) for a single-window batch.

    Trajectory ``n`` draws its latent code and observation noise from its own
    stream ``rng.spawn(N)[n]``, so paths do not depend on each other.
    """
    cfg = model.config
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if batch.size != 1:
        raise ValueError("forecast one window at a time")
    T, tau, L, D = cfg.T_past, cfg.tau, cfg.latent_size, cfg.D
    streams = rng.spawn(n_samples)
    eps_z = np.empty((n_samples, L))
    eps_x = np.empty((n_samples, tau, D))
    for i, s in enumerate(streams):
        eps_z[i] = s.normal(size=L)
        eps_x[i] = s.normal(size=(tau, D))
    if zero_latent_std:
        eps_z[:] = 0.0
    if zero_obs_std:
        eps_x[:] = 0.0

    with ad.no_grad():
        h_T = model.encode_timeseries(batch.past, batch.features, T)
        h_ev = model.encode_events(batch)
        prior = model.prior_params(h_T, h_ev)
        z = prior.mean.data + np.exp(0.5 * prior.log_var.data) * eps_z
        h = model.decoder_init(ad.tile_rows(h_T, n_samples), ad.tile_rows(h_ev, n_samples), z)
        x_prev = np.repeat(batch.past[:, -1], n_samples, axis=0)
        out = np.empty((n_samples, tau, D))
        for t in range(tau):
            feats = np.repeat(batch.features[:, T + t], n_samples, axis=0)
            h, obs = model.decoder_step(x_prev, feats, h)
            out[:, t] = obs.mean.data + obs.std.data * eps_x[:, t]
            x_prev = obs.mean.data if mean_feedback else out[:, t]
    return out


def forecast(model: HybridForecaster, dataset: WindowDataset, start: int, n_samples: int = DEFAULT_SAMPLES,
             rng: Stream | None = None, scaler: Scaler | None = None, levels=DEFAULT_LEVELS,
             **flags) -> ForecastEnsemble:
    """Forecast the ``tau`` steps after the past window beginning at ``start``.

    Only the past values, the events up to the window end and the calendar
    features of the horizon are read.
    """
    if model.config.tau < 1:
        raise ValueError("horizon must be at least one step")
    rng = rng if rng is not None else Stream(0)
    batch = dataset.batch([start], with_future=False)
    paths = sample_trajectories(model, batch, n_samples, rng, **flags)
    if scaler is not None:
        paths = scaler.invert(paths)
    mean, quantiles = summarize(paths, levels)
    return ForecastEnsemble(paths, mean, quantiles, start)


def rolling_starts(first_forecast_index: int, last_index: int, T_past: int, tau: int,
                   stride: int | None = None) -> list[int]:
    """Window starts whose horizons begin at ``first_forecast_index`` and step by ``stride``.

    Every horizon must end at or before ``last_index`` (exclusive).
    """
    stride = tau if stride is None else stride
    out = []
    t = first_forecast_index
    while t + tau <= last_index:
        if t - T_past < 0:
            raise ValueError(f"forecast at index {t} has fewer than {T_past} past samples")
        out.append(t - T_past)
        t += stride
    return out
