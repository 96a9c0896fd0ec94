"""Synthetic series whose level is driven by a typed event stream."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import RawEvents, RawSeries
from .kvfile import parse_floats, read_kv
from .rng import Stream


@dataclass
class SynthConfig:
    length: int = 2000
    period: float = 24.0
    amplitude: float = 1.0
    level: float = 0.0
    rate: float = 1.0 / 24.0  # events per sampling interval
    magnitudes: list[float] = field(default_factory=lambda: [4.0, -4.0])
    noise_std: float = 0.3
    delay: float = 0.0  # sampling intervals between an event and its level shift
    seed: int = 0
    start: str = "2014-01-06T00:00:00"
    interval_seconds: int = 3600

    @property
    def n_types(self) -> int:
        return len(self.magnitudes)

    def to_kv(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "SynthConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in kinds:
                raise ValueError(f"unknown synth config key {k!r}")
            if k == "magnitudes":
                out[k] = parse_floats(v)
            elif k == "rate" and "/" in v:
                num, den = v.split("/")
                out[k] = float(num) / float(den)
            elif kinds[k] in ("int", int):
                out[k] = int(v)
            elif kinds[k] in ("str", str):
                out[k] = v
            else:
                out[k] = float(v)
        return cls(**out)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        return cls.from_kv(read_kv(path))


def level_shifts(point_times: np.ndarray, event_times: np.ndarray, event_types: np.ndarray,
                 magnitudes, delay: float = 0.0) -> np.ndarray:
    """Cumulative shift at each point: sum of magnitudes of events with time + delay < point time."""
    mags = np.asarray(magnitudes, dtype=np.float64)[np.asarray(event_types, dtype=np.int64) - 1]
    order = np.argsort(event_times + delay, kind="stable")
    onset = (event_times + delay)[order]
    cum = np.concatenate([[0.0], np.cumsum(mags[order])])
    return cum[np.searchsorted(onset, point_times, side="left")]


def synthesize(config: SynthConfig, rng: Stream | None = None,
               events: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[RawSeries, RawEvents]:
    """Seasonal + noise + event-driven level shifts.

    Events form a homogeneous Poisson stream on the index clock with types
    cycling 1, 2, ..., C. ``events`` overrides the stream with explicit
    (index_times, types).
    """
    rng = rng if rng is not None else Stream(config.seed)
    n = config.length
    step = np.timedelta64(int(config.interval_seconds), "s")
    start = np.datetime64(config.start, "s")
    stamps = start + step * np.arange(n)
    t = np.arange(1, n + 1, dtype=np.float64)

    if events is None:
        times = []
        if config.rate > 0:
            ev_rng = rng.split("events")
            clock = 0.0
            while True:
                clock += float(ev_rng.exponential(1.0 / config.rate))
                if clock > n:
                    break
                times.append(clock)
        times = np.array(times)
        types = (np.arange(len(times)) % config.n_types) + 1
    else:
        times, types = np.asarray(events[0], dtype=np.float64), np.asarray(events[1], dtype=np.int64)
    # snap to whole seconds so the events file round-trips exactly
    secs = np.round((times - 1.0) * config.interval_seconds).astype(np.int64)
    keep = np.concatenate([[True], np.diff(secs) > 0]) if len(secs) else np.zeros(0, bool)
    secs, types = secs[keep], types[keep]
    times = secs / config.interval_seconds + 1.0

    values = config.level + config.amplitude * np.sin(2 * np.pi * t / config.period)
    if config.noise_std > 0:
        values = values + config.noise_std * rng.split("noise").normal(size=n)
    values = values + level_shifts(t, times, types, config.magnitudes, config.delay)

    names = ["up", "down"] if config.n_types == 2 else [f"type{i}" for i in range(1, config.n_types + 1)]
    series = RawSeries(stamps, values[:, None], ["value"])
    ev = RawEvents(start + secs.astype("timedelta64[s]"), types.astype(np.int64), names)
    return series, ev
