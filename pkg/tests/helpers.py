"""Small fixtures shared across test modules."""

from __future__ import annotations

from hcf.model import HybridForecaster, ModelConfig
from hcf.rng import Stream
from hcf.synth import SynthConfig, synthesize
from hcf.workflow import prepare

SHRUNK = dict(hidden_size=8, latent_size=4, T_past=12, tau=4, K=1)


def tiny_setup(seed=0, length=200, holdout=50, rate=1 / 6, **model_kw):
    kw = {**SHRUNK, **model_kw}
    series, events = synthesize(SynthConfig(length=length, rate=rate, seed=seed))
    cfg = ModelConfig(**kw)
    prep = prepare(series, events, cfg.T_past, cfg.tau, holdout, n_types=cfg.C)
    model = HybridForecaster(cfg, rng=Stream(seed))
    return model, prep, series, events
