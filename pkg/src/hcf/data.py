"""Series/event ingestion, calendar features, scaling, windowing and event alignment.

Time inside a window is measured on an index clock: the i-th sample of a
series (0-based) sits at time ``i + 1`` and the clock advances by one per
sampling interval. Events land on the same clock with fractional times. A
window whose first past sample has index ``s`` covers the past range
``(s, s + T_past]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UP, DOWN = 1, 2
N_TIME_FEATURES = 4


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class RawSeries:
    timestamps: np.ndarray  # datetime64[s], shape (T,)
    values: np.ndarray  # shape (T, D)
    variable_names: list[str]

    @property
    def length(self) -> int:
        return len(self.timestamps)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def interval(self) -> np.timedelta64:
        if self.length < 2:
            return np.timedelta64(3600, "s")
        return self.timestamps[1] - self.timestamps[0]

    def index_time(self, ts: np.ndarray) -> np.ndarray:
        """Map instants onto the index clock (first sample at 1.0)."""
        delta = (np.asarray(ts, dtype="datetime64[s]") - self.timestamps[0]).astype(np.int64)
        return delta / self.interval.astype(np.int64) + 1.0

    def timestamps_after(self, n: int) -> np.ndarray:
        """The ``n`` sampling instants that follow the last one."""
        return self.timestamps[-1] + self.interval * np.arange(1, n + 1)

    def variable_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < self.dim:
                raise DataError(f"variable index {name_or_index} out of range for D={self.dim}")
            return int(name_or_index)
        try:
            return self.variable_names.index(name_or_index)
        except ValueError:
            raise DataError(f"unknown variable {name_or_index!r}; have {self.variable_names}") from None


@dataclass
class RawEvents:
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    types: np.ndarray  # int, 1..C
    type_names: list[str]

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    def __len__(self) -> int:
        return len(self.timestamps)

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.types == i + 1)) for i, name in enumerate(self.type_names)}

    @classmethod
    def empty(cls, type_names: Sequence[str]) -> "RawEvents":
        return cls(np.array([], dtype="datetime64[s]"), np.array([], dtype=np.int64), list(type_names))


# file formats ---------------------------------------------------------------

def _data_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, next(csv.reader([line]))


def _parse_ts(cell: str, path, lineno: int) -> np.datetime64:
    try:
        return np.datetime64(cell.strip(), "s")
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad timestamp {cell!r}") from None


def load_series(path, variables: Sequence[str] | None = None) -> RawSeries:
    """Read ``timestamp,<var1>,...`` rows; the grid must be gap-free and evenly spaced."""
    rows = _data_lines(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty series file") from None
    header = [h.strip() for h in header]
    if header[0] != "timestamp" or len(header) < 2:
        raise DataError(f"{path}: header must be 'timestamp,<var1>,...', got {header}")
    names = header[1:]
    if variables is not None and list(variables) != names:
        raise DataError(f"{path}: expected variables {list(variables)}, found {names}")
    stamps, values, linenos = [], [], []
    for lineno, cells in rows:
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        stamps.append(_parse_ts(cells[0], path, lineno))
        try:
            vals = [float(c) for c in cells[1:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value in {cells[1:]}") from None
        if not all(np.isfinite(vals)):
            raise DataError(f"{path}:{lineno}: missing or non-finite value")
        values.append(vals)
        linenos.append(lineno)
    if not stamps:
        raise DataError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    order = np.argsort(ts, kind="stable")
    ts, vals, linenos = ts[order], np.array(values, dtype=np.float64)[order], np.array(linenos)[order]
    if len(ts) > 1:
        steps = np.diff(ts).astype(np.int64)
        dup = np.flatnonzero(steps == 0)
        if dup.size:
            raise DataError(f"{path}:{linenos[dup[0] + 1]}: duplicate timestamp {ts[dup[0]]}")
        step = steps.min()
        bad = np.flatnonzero(steps != step)
        if bad.size:
            i = bad[0]
            raise DataError(
                f"{path}:{linenos[i + 1]}: gap in sampling grid between {ts[i]} and {ts[i + 1]} "
                f"(interval {step}s)"
            )
    return RawSeries(ts, vals, names)


def write_series(path, series: RawSeries, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *series.variable_names])
        for ts, row in zip(np.datetime_as_string(series.timestamps, unit="s"), series.values):
            w.writerow([ts, *(repr(float(v)) for v in row)])


def load_events(path, type_names: Sequence[str] | None = None) -> RawEvents:
    """Read ``timestamp,type`` rows.

    Types are 1-based integers or registered names. Names are registered by
    ``type_names`` or by a ``# types: a,b,...`` comment line in the file.
    Timestamps must be strictly increasing in file order.
    """
    path = Path(path)
    names = list(type_names) if type_names is not None else None
    if names is None:
        for line in path.read_text(encoding="utf-8").splitlines():
            s = line.strip()
            if s.startswith("#") and s[1:].strip().startswith("types:"):
                names = [n.strip() for n in s.split(":", 1)[1].split(",") if n.strip()]
                break
    rows = _data_lines(path)
    header = next(rows, None)
    stamps, types = [], []
    if header is not None:
        cols = [h.strip() for h in header[1]]
        if cols != ["timestamp", "type"]:
            raise DataError(f"{path}: header must be 'timestamp,type', got {cols}")
        for lineno, cells in rows:
            if len(cells) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns")
            ts = _parse_ts(cells[0], path, lineno)
            if stamps and ts <= stamps[-1]:
                raise DataError(f"{path}:{lineno}: event timestamps must be strictly increasing ({ts})")
            cell = cells[1].strip()
            try:
                t = int(cell)
            except ValueError:
                if names is None or cell not in names:
                    raise DataError(f"{path}:{lineno}: unknown event type {cell!r}") from None
                t = names.index(cell) + 1
            stamps.append(ts)
            types.append(t)
    types_arr = np.array(types, dtype=np.int64)
    if names is None:
        n_types = int(types_arr.max()) if types_arr.size else 0
        names = [f"type{i}" for i in range(1, n_types + 1)]
    if types_arr.size and (types_arr.min() < 1 or types_arr.max() > len(names)):
        raise DataError(f"{path}: event type out of range 1..{len(names)}")
    return RawEvents(np.array(stamps, dtype="datetime64[s]"), types_arr, names)


def write_events(path, events: RawEvents, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"# types: {','.join(events.type_names)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "type"])
        for ts, t in zip(np.datetime_as_string(events.timestamps, unit="s"), events.types):
            w.writerow([ts, int(t)])


# event extraction -------------------------------------------------------------

def extract_events(series: RawSeries, variable=0, threshold: float = 30.0) -> RawEvents:
    """Mark steps whose first difference exceeds ``threshold`` as up/down events."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    v = series.values[:, series.variable_index(variable)]
    d = np.diff(v)
    idx = np.flatnonzero((d > threshold) | (d < -threshold))
    types = np.where(d[idx] > threshold, UP, DOWN)
    return RawEvents(series.timestamps[idx + 1].copy(), types.astype(np.int64), ["up", "down"])


# calendar features ------------------------------------------------------------

@dataclass
class TemporalFeatures:
    absolute_time: np.ndarray
    hour: np.ndarray
    day_of_week: np.ndarray
    month: np.ndarray

    def encoded(self) -> np.ndarray:
        """(n, 4) reals: absolute time, hour/23, weekday/6, (month-1)/11."""
        return np.stack(
            [self.absolute_time, self.hour / 23.0, self.day_of_week / 6.0, (self.month - 1) / 11.0],
            axis=-1,
        )


def make_temporal_features(timestamps, start, end) -> TemporalFeatures:
    """Calendar features; absolute time is 0 at ``start`` and 1 at ``end``."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    secs = ts.astype(np.int64)
    start_s = np.datetime64(start, "s").astype(np.int64)
    span = np.datetime64(end, "s").astype(np.int64) - start_s
    absolute = (secs - start_s) / span if span > 0 else np.zeros(len(ts))
    sec_of_day = np.mod(secs, 86400)
    days = np.floor_divide(secs, 86400)
    return TemporalFeatures(
        absolute_time=np.asarray(absolute, dtype=np.float64),
        hour=sec_of_day / 3600.0,
        day_of_week=np.mod(days + 3, 7).astype(np.float64),  # 1970-01-01 was a Thursday
        month=(np.mod(ts.astype("datetime64[M]").astype(np.int64), 12) + 1).astype(np.float64),
    )


# scaling --------------------------------------------------------------------

@dataclass
class Scaler:
    """Per-variable standardisation with population statistics."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def to_kv(self) -> dict:
        return {"mean": list(map(float, self.mean)), "std": list(map(float, self.std))}

    @classmethod
    def from_kv(cls, kv: dict) -> "Scaler":
        from .kvfile import parse_floats

        return cls(np.array(parse_floats(kv["mean"])), np.array(parse_floats(kv["std"])))


def fit_scaler(series, train_range: tuple[int, int] | None = None) -> Scaler:
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    lo, hi = train_range if train_range is not None else (0, len(values))
    chunk = values[lo:hi]
    if len(chunk) == 0:
        raise DataError("empty training range for scaler")
    std = chunk.std(axis=0)
    if np.any(std <= 0):
        raise DataError(f"zero-variance variable(s) at columns {np.flatnonzero(std <= 0).tolist()}")
    return Scaler(chunk.mean(axis=0), std)


# windows ----------------------------------------------------------------------

@dataclass
class TimeSeriesWindow:
    values: np.ndarray  # (T_past, D) standardised
    future: np.ndarray | None  # (tau, D) standardised, absent at forecast time
    features: np.ndarray  # (T_past + tau, 4) encoded
    start: int  # index of the first past sample in the full series

    @property
    def T_past(self) -> int:
        return len(self.values)


def window_starts(n_points: int, T_past: int, tau: int, policy: str = "exhaustive",
                  rng=None, count: int | None = None) -> np.ndarray:
    """0-based first-sample indices of width-``T_past + tau`` windows.

    ``exhaustive`` lists every start once, ``random`` draws ``count`` starts
    uniformly with replacement, ``permutation`` draws without replacement.
    """
    width = T_past + tau
    n = n_points - width + 1
    if n < 1:
        raise DataError(f"series of length {n_points} is shorter than window width {width}")
    if policy == "exhaustive":
        return np.arange(n)
    if rng is None:
        raise ValueError(f"policy {policy!r} needs a random stream")
    if policy == "random":
        return np.asarray(rng.integers(0, n, size=n if count is None else count))
    if policy == "permutation":
        return np.asarray(rng.permutation(n)[: n if count is None else count])
    raise ValueError(f"unknown shingle policy {policy!r}")


def shingle(values: np.ndarray, features: np.ndarray, T_past: int, tau: int,
            policy: str = "exhaustive", rng=None, count: int | None = None) -> Iterator[TimeSeriesWindow]:
    for s in window_starts(len(values), T_past, tau, policy, rng, count):
        s = int(s)
        yield TimeSeriesWindow(
            values[s:s + T_past], values[s + T_past:s + T_past + tau],
            features[s:s + T_past + tau], s,
        )


# events on the index clock ------------------------------------------------------

@dataclass
class EventTrack:
    """A whole event stream placed on a series' index clock."""

    times: np.ndarray  # float index-times, strictly increasing
    types: np.ndarray  # 1..n_types
    features: np.ndarray  # (n, 4) encoded calendar features at event time
    n_types: int

    @classmethod
    def from_events(cls, events: RawEvents, series: RawSeries, anchor) -> "EventTrack":
        feats = make_temporal_features(events.timestamps, *anchor).encoded()
        return cls(series.index_time(events.timestamps), events.types.copy(),
                   feats.reshape(-1, N_TIME_FEATURES), events.n_types)

    @classmethod
    def empty(cls, n_types: int) -> "EventTrack":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, N_TIME_FEATURES)), n_types)

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class EventWindow:
    types: np.ndarray  # (M,) 1..C
    one_hot: np.ndarray  # (M, C)
    dt: np.ndarray  # (M,) inter-event durations, first measured from window start
    features: np.ndarray  # (M, 4)
    end_dt: float  # window end minus last event (window length when M == 0)
    end_features: np.ndarray  # (4,) calendar features at the window end
    pad_length: int = 0

    @property
    def n_events(self) -> int:
        return len(self.types)

    def event_times(self, window_start: float) -> np.ndarray:
        return window_start + np.cumsum(self.dt)

    def padded(self, pad_to: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Leading zero padding to ``pad_to`` slots: (one_hot, dt, features, mask)."""
        m = self.n_events
        if pad_to < m:
            raise DataError(f"pad_to={pad_to} is smaller than the {m} events in the window")
        pad = pad_to - m
        c = self.one_hot.shape[1]
        one_hot = np.concatenate([np.zeros((pad, c)), self.one_hot])
        dt = np.concatenate([np.zeros(pad), self.dt])
        feats = np.concatenate([np.zeros((pad, N_TIME_FEATURES)), self.features])
        mask = np.concatenate([np.zeros(pad), np.ones(m)])
        return one_hot, dt, feats, mask


def align_events(track: EventTrack, window: TimeSeriesWindow, pad_to: int | None = None) -> EventWindow:
    """Select events in the window's past range ``(start, start + T_past]``."""
    t0 = float(window.start)
    t_end = t0 + window.T_past
    lo = np.searchsorted(track.times, t0, side="right")
    hi = np.searchsorted(track.times, t_end, side="right")
    times = track.times[lo:hi]
    types = track.types[lo:hi]
    m = len(times)
    if pad_to is not None and pad_to < m:
        raise DataError(f"pad_to={pad_to} is smaller than the {m} events in the window")
    one_hot = np.zeros((m, track.n_types))
    one_hot[np.arange(m), types - 1] = 1.0
    dt = np.diff(np.concatenate([[t0], times]))
    end_dt = t_end - times[-1] if m else float(window.T_past)
    return EventWindow(
        types=types.copy(), one_hot=one_hot, dt=dt, features=track.features[lo:hi].copy(),
        end_dt=float(end_dt), end_features=window.features[window.T_past - 1].copy(),
        pad_length=0 if pad_to is None else pad_to - m,
    )


# batches ----------------------------------------------------------------------

@dataclass
class Batch:
    past: np.ndarray  # (B, T, D)
    future: np.ndarray | None  # (B, tau, D)
    features: np.ndarray  # (B, T + tau, 4)
    ev_one_hot: np.ndarray  # (B, Mmax, C)
    ev_dt: np.ndarray  # (B, Mmax, 1)
    ev_features: np.ndarray  # (B, Mmax, 4)
    ev_mask: np.ndarray  # (B, Mmax, 1)
    end_dt: np.ndarray  # (B, 1)
    end_features: np.ndarray  # (B, 4)
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.past.shape[0]


def collate(windows: Sequence[TimeSeriesWindow], event_windows: Sequence[EventWindow],
            n_types: int) -> Batch:
    """Stack windows; event slots are padded ahead to the batch maximum and masked."""
    m_max = max((e.n_events for e in event_windows), default=0)
    parts = [e.padded(m_max) for e in event_windows]
    b = len(windows)
    with_future = all(w.future is not None for w in windows)
    return Batch(
        past=np.stack([w.values for w in windows]),
        future=np.stack([w.future for w in windows]) if with_future else None,
        features=np.stack([w.features for w in windows]),
        ev_one_hot=np.stack([p[0] for p in parts]) if m_max else np.zeros((b, 0, n_types)),
        ev_dt=np.stack([p[1] for p in parts])[..., None] if m_max else np.zeros((b, 0, 1)),
        ev_features=np.stack([p[2] for p in parts]) if m_max else np.zeros((b, 0, N_TIME_FEATURES)),
        ev_mask=np.stack([p[3] for p in parts])[..., None] if m_max else np.zeros((b, 0, 1)),
        end_dt=np.array([[e.end_dt] for e in event_windows]),
        end_features=np.stack([e.end_features for e in event_windows]),
        starts=np.array([w.start for w in windows], dtype=np.int64),
    )


@dataclass
class WindowDataset:
    """A standardised series with its calendar features and event track.

    ``features`` extends ``tau`` steps past the last sample so that a window
    ending at the series end can still be forecast.
    """

    values: np.ndarray
    features: np.ndarray
    events: EventTrack
    T_past: int
    tau: int

    @property
    def n_points(self) -> int:
        return len(self.values)

    def window(self, start: int, with_future: bool = True) -> TimeSeriesWindow:
        T, tau = self.T_past, self.tau
        if start < 0 or start + T > self.n_points:
            raise DataError(f"window start {start} leaves fewer than {T} past samples")
        future = None
        if with_future:
            if start + T + tau > self.n_points:
                raise DataError(f"window start {start} leaves fewer than {tau} future samples")
            future = self.values[start + T:start + T + tau]
        return TimeSeriesWindow(self.values[start:start + T], future,
                                self.features[start:start + T + tau], int(start))

    def batch(self, starts: Sequence[int], with_future: bool = True) -> Batch:
        windows = [self.window(int(s), with_future) for s in starts]
        evs = [align_events(self.events, w) for w in windows]
        return collate(windows, evs, self.events.n_types)

    def without_events(self) -> "WindowDataset":
        return WindowDataset(self.values, self.features, EventTrack.empty(self.events.n_types),
                             self.T_past, self.tau)


def build_dataset(series: RawSeries, events: RawEvents | None, scaler: Scaler, anchor,
                  T_past: int, tau: int, n_types: int | None = None) -> WindowDataset:
    """``anchor`` is the (first, last) training instant used for absolute time."""
    stamps = np.concatenate([series.timestamps, series.timestamps_after(tau)])
    feats = make_temporal_features(stamps, *anchor).encoded()
    if events is None:
        track = EventTrack.empty(n_types or 0)
    else:
        track = EventTrack.from_events(events, series, anchor)
        if n_types is not None and n_types != track.n_types:
            if track.n_types > n_types:
                raise DataError(f"events have {track.n_types} types, model expects {n_types}")
            track.n_types = n_types
    return WindowDataset(scaler.apply(series.values), feats, track, T_past, tau)
