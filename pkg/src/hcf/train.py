"""Stochastic variational training with Adam."""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import WindowDataset
from .model import HybridForecaster
from .params import adam_step
from .rng import Stream

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """The loss or a gradient became non-finite."""


def training_starts(dataset: WindowDataset, train_end: int | None = None) -> np.ndarray:
    """Window starts whose past and future both lie before ``train_end``."""
    end = dataset.n_points if train_end is None else train_end
    n = end - (dataset.T_past + dataset.tau) + 1
    if n < 1:
        raise ValueError(f"training range of {end} points is shorter than one window")
    return np.arange(n)


def train(model: HybridForecaster, dataset: WindowDataset, epochs: int, batch_size: int = 32,
          lr: float = 1e-3, rng: Stream | None = None, train_end: int | None = None,
          start_epoch: int = 0, steps_per_epoch: int | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Run ``epochs`` epochs and return the per-epoch mean negative ELBO.

    Each step draws ``batch_size`` windows uniformly with replacement. Epoch
    ``e`` uses the stream ``rng.split("epoch", e)``, so training resumed at
    ``start_epoch`` reproduces an uninterrupted run exactly.
    """
    rng = rng if rng is not None else Stream(0)
    starts = training_starts(dataset, train_end)
    steps = steps_per_epoch or math.ceil(len(starts) / batch_size)
    trace = []
    for epoch in range(start_epoch, start_epoch + epochs):
        ep = rng.split("epoch", epoch)
        total = 0.0
        for step in range(steps):
            chosen = starts[ep.integers(0, len(starts), size=batch_size)]
            batch = dataset.batch(chosen)
            loss = -model.elbo(batch, ep)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch + 1}, batch {step + 1} "
                    f"(window starts {chosen.tolist()})"
                )
            ad.backward(loss)
            try:
                adam_step(model.store, lr=lr)
            except FloatingPointError as exc:
                raise TrainingAborted(f"epoch {epoch + 1}, batch {step + 1}: {exc}") from exc
            total += value
        trace.append(total / steps)
        log.info("epoch %d  neg-elbo %.5f", epoch + 1, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, trace[-1])
    return trace
