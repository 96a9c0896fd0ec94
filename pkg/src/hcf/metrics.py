"""Point and probabilistic forecast scores.

Sample-based functions take ensembles with the member axis first, e.g.
``samples[n, t, d]`` against ``truth[t, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

DEFAULT_COVERAGE_LEVELS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def crps_gaussian(mu, sigma, x):
    """Closed-form CRPS of N(mu, sigma^2) against observation ``x``."""
    mu, sigma, x = np.asarray(mu, float), np.asarray(sigma, float), np.asarray(x, float)
    if np.any(sigma <= 0):
        raise ValueError("crps_gaussian: sigma must be positive")
    z = (x - mu) / sigma
    out = sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    return out if out.ndim else float(out)


def crps_empirical(samples, x):
    """Exact integral of (F_n(y) - 1{y >= x})^2 for the ensemble's step CDF F_n.

    The integrand is piecewise constant between the sorted members and ``x``,
    so the integral is a finite sum of (height^2 * width) terms.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    x = np.asarray(x, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("crps_empirical: empty ensemble")
    if s.shape[1:] != x.shape:
        raise ValueError(f"crps_empirical: samples {s.shape} do not match truth {x.shape}")
    n = s.shape[0]
    p = np.sum(s < x, axis=0)  # members strictly below the observation
    i = np.arange(n + 1).reshape((-1,) + (1,) * x.ndim)
    below = np.concatenate([s, s[-1:]], axis=0)
    above = np.concatenate([s[:1], s], axis=0)
    merged = np.where(i < p, below, np.where(i == p, x, above))
    width = np.diff(merged, axis=0)
    k = i[:-1]
    past_x = k >= p
    cdf = np.where(past_x, k, k + 1) / n
    height = cdf - past_x
    out = np.sum(height * height * width, axis=0)
    return out if out.ndim else float(out)


def crps_energy(samples, x):
    """CRPS via E|X - x| - 0.5 E|X - X'| over all ordered member pairs."""
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    x = np.asarray(x, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        raise ValueError("crps_energy: empty ensemble")
    w = (2.0 * np.arange(n) - n + 1).reshape((-1,) + (1,) * x.ndim)
    pair_mean = 2.0 * np.sum(w * s, axis=0) / (n * n)
    out = np.mean(np.abs(s - x), axis=0) - 0.5 * pair_mean
    return out if out.ndim else float(out)


def crps_average(forecasts: Sequence, truths: Sequence) -> float:
    """Mean CRPS over variables; each forecast is an ensemble (or a point value)."""
    if len(forecasts) != len(truths):
        raise ValueError(f"{len(forecasts)} forecasts vs {len(truths)} truths")
    if not forecasts:
        raise ValueError("crps_average: nothing to average")
    return float(np.mean([crps_empirical(np.atleast_1d(f), float(x)) for f, x in zip(forecasts, truths)]))


def _check_same(truth, pred, name):
    truth, pred = np.asarray(truth, float), np.asarray(pred, float)
    if truth.shape != pred.shape:
        raise ValueError(f"{name}: shape {truth.shape} vs {pred.shape}")
    return truth, pred


def rmse(truth, predicted_mean) -> float:
    truth, pred = _check_same(truth, predicted_mean, "rmse")
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


def mae(truth, predicted) -> float:
    truth, pred = _check_same(truth, predicted, "mae")
    return float(np.mean(np.abs(truth - pred)))


def coverage_curve(ensembles: Sequence, truths: Sequence, levels=DEFAULT_COVERAGE_LEVELS) -> list[tuple[float, float]]:
    """Fraction of cells whose truth is at or below the ensemble's p-quantile."""
    if len(ensembles) == 0 or len(ensembles) != len(truths):
        raise ValueError("coverage_curve: need equally many (non-zero) ensembles and truths")
    levels = [float(p) for p in levels]
    if any(not 0.0 < p < 1.0 for p in levels):
        raise ValueError("coverage levels must lie in (0, 1)")
    hits = np.zeros(len(levels))
    cells = 0
    for samples, truth in zip(ensembles, truths):
        samples, truth = np.asarray(samples, float), np.asarray(truth, float)
        q = np.quantile(samples, levels, axis=0, method="linear")
        hits += np.sum(truth[None] <= q, axis=tuple(range(1, q.ndim)))
        cells += truth.size
    return [(p, float(h / cells)) for p, h in zip(levels, hits)]


def calibration_r2(curve: Sequence[tuple[float, float]]) -> float:
    """1 - SS_res / SS_tot of a coverage curve against the diagonal Coverage(p) = p.

    Residuals are (coverage - p); the total sum of squares is that of the
    levels about their mean, so a flat curve at the mean level scores 0.
    """
    if len(curve) < 2:
        raise ValueError("calibration_r2: need at least two points")
    p = np.array([c[0] for c in curve])
    cov = np.array([c[1] for c in curve])
    ss_tot = np.sum((p - p.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("calibration_r2: all levels identical")
    return float(1.0 - np.sum((cov - p) ** 2) / ss_tot)


@dataclass
class EvalReport:
    rmse: float
    crps: float
    mae: float
    coverage_curve: list[tuple[float, float]]
    calibration_r2: float
    n_windows: int = 0
    per_variable: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_kv(self) -> dict:
        out = {
            "rmse": self.rmse,
            "crps": self.crps,
            "mae": self.mae,
            "calibration_r2": self.calibration_r2,
            "n_windows": self.n_windows,
            "aggregation": "per-window-then-mean",
        }
        for var, scores in self.per_variable.items():
            for k, v in scores.items():
                out[f"{k}.{var}"] = v
        return out

    def write(self, report_path, curve_path, header: str | None = None) -> None:
        from .kvfile import write_kv

        write_kv(report_path, self.to_kv(), header)
        lines = [f"# {header}"] if header else []
        lines.append("p,coverage")
        lines += [f"{p!r},{c!r}" for p, c in self.coverage_curve]
        Path(curve_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(ensembles: Sequence[np.ndarray], truths: Sequence[np.ndarray],
             variable_names: Sequence[str] | None = None,
             levels=DEFAULT_COVERAGE_LEVELS) -> EvalReport:
    """Score rolling forecasts: each ensemble is (N, tau, D), each truth (tau, D).

    RMSE, MAE and CRPS are computed per window (over horizon and variables)
    and then averaged over windows. RMSE and MAE use the ensemble mean.
    """
    if len(ensembles) == 0 or len(ensembles) != len(truths):
        raise ValueError("evaluate: need equally many (non-zero) ensembles and truths")
    ens = [np.asarray(e, float) for e in ensembles]
    tru = [np.asarray(t, float) for t in truths]
    for e, t in zip(ens, tru):
        if e.shape[1:] != t.shape:
            raise ValueError(f"evaluate: ensemble {e.shape} does not match truth {t.shape}")
    D = tru[0].shape[-1]
    names = list(variable_names) if variable_names is not None else [f"v{i}" for i in range(D)]
    crps_cells = [crps_empirical(e, t) for e, t in zip(ens, tru)]
    means = [e.mean(axis=0) for e in ens]
    curve = coverage_curve(ens, tru, levels)
    per_var = {}
    for d, name in enumerate(names):
        per_var[name] = {
            "rmse": float(np.mean([rmse(t[:, d], m[:, d]) for t, m in zip(tru, means)])),
            "crps": float(np.mean([c[:, d].mean() for c in crps_cells])),
            "mae": float(np.mean([mae(t[:, d], m[:, d]) for t, m in zip(tru, means)])),
        }
    return EvalReport(
        rmse=float(np.mean([rmse(t, m) for t, m in zip(tru, means)])),
        crps=float(np.mean([c.mean() for c in crps_cells])),
        mae=float(np.mean([mae(t, m) for t, m in zip(tru, means)])),
        coverage_curve=curve,
        calibration_r2=calibration_r2(curve),
        n_windows=len(ens),
        per_variable=per_var,
    )
