"""Conditional latent-variable forecaster over a series and an event stream.

Past series values and calendar features feed a per-sample GRU; events feed a
per-event GRU that takes the inter-event duration and finishes with one
auxiliary transit at the window end carrying a zero type vector. The two
summaries parameterise a diagonal-Gaussian prior over a latent code; during
training a recognition head sees the series encoder after it has also read
the future. A GRU decoder initialised from (summaries, code) emits Gaussian
observations step by step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_TIME_FEATURES, Batch
from .gaussian import DiagGaussian, diag_gaussian_kl, gaussian_log_pdf, reparameterize
from .params import ParameterStore
from .rng import Stream


@dataclass
class ModelConfig:
    D: int = 1
    C: int = 2
    hidden_size: int = 100
    latent_size: int = 50
    K: int = 5
    T_past: int = 168
    tau: int = 24
    std_floor: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive")

    def to_kv(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: (float(v) if k == "std_floor" else int(v)) for k, v in kv.items() if k in known})


class ObservationParams(NamedTuple):
    mean: Tensor
    std: Tensor


class GRUWeights(NamedTuple):
    W_ih: Tensor
    W_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor


def _gru_update(gx: Tensor, h: Tensor, w: GRUWeights) -> Tensor:
    """GRU step given the already-projected input ``gx = x W_ih + b_ih``."""
    H = h.shape[-1]
    gh = ad.matmul(h, w.W_hh) + w.b_hh
    gates = ad.sigmoid(gx[..., :2 * H] + gh[..., :2 * H])
    r, z = gates[..., :H], gates[..., H:]
    n = ad.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return n + z * (h - n)


def rnn_cell_step(x: Tensor, h: Tensor, w: GRUWeights) -> Tensor:
    """One gated recurrent update: reset/update gates and a tanh candidate."""
    if x.shape[-1] != w.W_ih.shape[0] or h.shape[-1] != w.W_hh.shape[0]:
        raise ad.ShapeError("rnn_cell_step", f"input {x.shape} / state {h.shape} vs cell {w.W_ih.shape}")
    return _gru_update(ad.matmul(x, w.W_ih) + w.b_ih, h, w)


def _uniform(rng: Stream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class HybridForecaster:
    """Parameters live in ``self.store``; the methods build graphs on demand."""

    def __init__(self, config: ModelConfig, store: ParameterStore | None = None, rng: Stream | None = None):
        self.config = config
        if store is None:
            store = self.init_params(config, rng if rng is not None else Stream(0))
        self.store = store
        self._check_store()

    # parameters ---------------------------------------------------------------

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        H, L, D, C, F = cfg.hidden_size, cfg.latent_size, cfg.D, cfg.C, N_TIME_FEATURES
        shapes: dict[str, tuple[int, ...]] = {}

        def linear(name, n_in, n_out):
            shapes[f"{name}.W"] = (n_in, n_out)
            shapes[f"{name}.b"] = (n_out,)

        def gru(name, n_in):
            shapes[f"{name}.W_ih"] = (n_in, 3 * H)
            shapes[f"{name}.W_hh"] = (H, 3 * H)
            shapes[f"{name}.b_ih"] = (3 * H,)
            shapes[f"{name}.b_hh"] = (3 * H,)

        linear("time_feat", F, H)  # shared calendar-feature extractor
        linear("value_feat", D, H)  # shared observation extractor
        linear("type_feat", C, H)
        gru("ts_rnn", 2 * H)
        gru("event_rnn", 2 * H + 1)
        for head in ("prior", "recog"):
            linear(f"{head}.hidden", 2 * H, H)
            linear(f"{head}.mu", H, L)
            linear(f"{head}.std", H, L)
        linear("dec_latent", L, H)
        linear("dec_init", 3 * H, H)
        gru("dec_rnn", 2 * H)
        linear("obs.hidden", H, H)
        linear("obs.out", H, 2 * D)
        return shapes

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng: Stream) -> ParameterStore:
        store = ParameterStore()
        init = rng.split("init")
        for name, shape in cls.param_shapes(cfg).items():
            if len(shape) == 2:
                store.add(name, _uniform(init, shape[0], shape))
            else:
                store.add(name, np.zeros(shape))
        return store

    def _check_store(self) -> None:
        for name, shape in self.param_shapes(self.config).items():
            if name not in self.store:
                raise KeyError(f"parameter {name!r} missing from store")
            if self.store[name].shape != shape:
                raise ad.ShapeError("HybridForecaster", f"{name} has shape {self.store[name].shape}, want {shape}")

    def _lin(self, x, name: str) -> Tensor:
        return ad.matmul(x, self.store[f"{name}.W"]) + self.store[f"{name}.b"]

    def _gru(self, name: str) -> GRUWeights:
        s = self.store
        return GRUWeights(s[f"{name}.W_ih"], s[f"{name}.W_hh"], s[f"{name}.b_ih"], s[f"{name}.b_hh"])

    def time_features(self, feats) -> Tensor:
        return ad.tanh(self._lin(feats, "time_feat"))

    def value_features(self, x) -> Tensor:
        return ad.tanh(self._lin(x, "value_feat"))

    def type_features(self, one_hot) -> Tensor:
        return ad.tanh(self._lin(one_hot, "type_feat"))

    def _zeros(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.config.hidden_size)))

    def _dt(self, dt: np.ndarray) -> np.ndarray:
        return dt / self.config.T_past

    # encoders -----------------------------------------------------------------

    def _ts_transit(self, values: np.ndarray, feats: np.ndarray, h: Tensor) -> Tensor:
        w = self._gru("ts_rnn")
        x = ad.concat([self.value_features(values), self.time_features(feats)], axis=-1)
        gx = ad.matmul(x, w.W_ih) + w.b_ih
        for t in range(values.shape[1]):
            h = _gru_update(gx[:, t], h, w)
        return h

    def encode_timeseries(self, values: np.ndarray, features: np.ndarray, steps: int) -> Tensor:
        """Final state of the series GRU after ``steps`` transits from zero.

        ``steps`` is 0, ``T_past`` (prior path) or ``T_past + tau`` (the
        recognition path continues from the very same state at ``T_past``).
        """
        T, tau = self.config.T_past, self.config.tau
        if steps not in (0, T, T + tau):
            raise ValueError(f"steps must be 0, {T} or {T + tau}, got {steps}")
        if values.shape[1] < steps or features.shape[1] < steps:
            raise ValueError(f"need {steps} samples, got {values.shape[1]}")
        h = self._zeros(values.shape[0])
        if steps >= T:
            h = self._ts_transit(values[:, :T], features[:, :T], h)
        if steps == T + tau:
            h = self._ts_transit(values[:, T:T + tau], features[:, T:T + tau], h)
        return h

    def encode_events(self, batch: Batch, end_marker: bool = True) -> Tensor:
        """Event GRU over real (unmasked) events, then the auxiliary end transit."""
        w = self._gru("event_rnn")
        B = batch.size
        h = self._zeros(B)
        m_max = batch.ev_one_hot.shape[1]
        if m_max:
            x = ad.concat(
                [self.type_features(batch.ev_one_hot), Tensor(self._dt(batch.ev_dt)),
                 self.time_features(batch.ev_features)],
                axis=-1,
            )
            gx = ad.matmul(x, w.W_ih) + w.b_ih
            for m in range(m_max):
                mask = batch.ev_mask[:, m]
                if not mask.any():
                    continue
                h_new = _gru_update(gx[:, m], h, w)
                if mask.all():
                    h = h_new
                else:
                    h = h * (1.0 - mask) + h_new * mask
        if not end_marker:
            return h
        if batch.end_dt is None or batch.end_features is None:
            raise ValueError("event window has no end marker")
        x_end = ad.concat(
            [self.type_features(np.zeros((B, self.config.C))), Tensor(self._dt(batch.end_dt)),
             self.time_features(batch.end_features)],
            axis=-1,
        )
        return rnn_cell_step(x_end, h, w)

    # latent heads ---------------------------------------------------------------

    def _latent_head(self, prefix: str, h_ts: Tensor, h_ev: Tensor) -> DiagGaussian:
        a = ad.tanh(self._lin(ad.concat([h_ts, h_ev], axis=-1), f"{prefix}.hidden"))
        mu = self._lin(a, f"{prefix}.mu")
        std = ad.softplus(self._lin(a, f"{prefix}.std")) + self.config.std_floor
        return DiagGaussian(mu, ad.log(std) * 2.0)

    def prior_params(self, h_ts: Tensor, h_ev: Tensor) -> DiagGaussian:
        return self._latent_head("prior", h_ts, h_ev)

    def recognition_params(self, h_ts_full: Tensor, h_ev: Tensor) -> DiagGaussian:
        return self._latent_head("recog", h_ts_full, h_ev)

    # decoder ----------------------------------------------------------------------

    def decoder_init(self, h_ts: Tensor, h_ev: Tensor, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.config.latent_size:
            raise ad.ShapeError("decoder_init", f"latent of width {z.shape[-1]}, want {self.config.latent_size}")
        zf = ad.tanh(self._lin(z, "dec_latent"))
        return ad.tanh(self._lin(ad.concat([h_ts, h_ev, zf], axis=-1), "dec_init"))

    def observation(self, h: Tensor) -> ObservationParams:
        D = self.config.D
        out = self._lin(ad.tanh(self._lin(h, "obs.hidden")), "obs.out")
        std = ad.softplus(out[..., D:]) + self.config.std_floor
        return ObservationParams(out[..., :D], std)

    def decoder_step(self, prev_x, feats, h: Tensor) -> tuple[Tensor, ObservationParams]:
        x = ad.concat([self.value_features(prev_x), self.time_features(feats)], axis=-1)
        h = rnn_cell_step(x, h, self._gru("dec_rnn"))
        return h, self.observation(h)

    # objective ----------------------------------------------------------------------

    def elbo_terms(self, batch: Batch, rng: Stream | None = None, eps: np.ndarray | None = None,
                   K: int | None = None) -> tuple[Tensor, Tensor]:
        """(summed KL, summed per-sample-averaged log likelihood) over the batch."""
        cfg = self.config
        K = cfg.K if K is None else K
        if K < 1:
            raise ValueError("K must be at least 1")
        if batch.future is None:
            raise ValueError("the objective needs the future segment")
        B, T, L = batch.size, cfg.T_past, cfg.latent_size
        h_T = self.encode_timeseries(batch.past, batch.features, T)
        h_full = self._ts_transit(batch.future, batch.features[:, T:], h_T)
        h_ev = self.encode_events(batch)
        prior = self.prior_params(h_T, h_ev)
        q = self.recognition_params(h_full, h_ev)
        kl = diag_gaussian_kl(q, prior)

        if eps is None:
            if rng is None:
                raise ValueError("need either rng or eps")
            eps = rng.normal(size=(K, B, L))
        eps = np.asarray(eps).reshape(K * B, L)
        z = reparameterize(DiagGaussian(ad.tile_rows(q.mean, K), ad.tile_rows(q.log_var, K)), eps)
        h = self.decoder_init(ad.tile_rows(h_T, K), ad.tile_rows(h_ev, K), z)

        # teacher forcing: step t reads the true value at t-1, starting from the last past value
        prev = np.concatenate([batch.past[:, -1:], batch.future[:, :-1]], axis=1)
        w = self._gru("dec_rnn")
        x = ad.concat([self.value_features(prev), self.time_features(batch.features[:, T:])], axis=-1)
        gx = ad.tile_rows(ad.matmul(x, w.W_ih) + w.b_ih, K)
        states = []
        for t in range(cfg.tau):
            h = _gru_update(gx[:, t], h, w)
            states.append(h)
        obs = self.observation(ad.stack(states, axis=1))
        target = np.tile(batch.future, (K, 1, 1))
        loglik = gaussian_log_pdf(target, obs.mean, obs.std) * (1.0 / K)
        return kl, loglik

    def elbo(self, batch: Batch, rng: Stream | None = None, eps: np.ndarray | None = None,
             K: int | None = None) -> Tensor:
        """Batch-mean of  -KL(q || prior) + (1/K) sum_k log p(future | past, z_k)."""
        kl, loglik = self.elbo_terms(batch, rng, eps, K)
        return (loglik - kl) * (1.0 / batch.size)
