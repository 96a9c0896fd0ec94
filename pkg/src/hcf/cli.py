"""Command line: synth, extract-events, train, forecast, evaluate.

Settings resolve as defaults < ``--config`` file < ``HCF_SEED`` < flags.
Exit status: 0 success, 1 usage, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DataError, RawEvents, RawSeries, Scaler, load_events, load_series, write_events, write_series
from .data import extract_events as extract
from .forecast import DEFAULT_LEVELS, ForecastEnsemble, forecast, summarize
from .kvfile import config_hash, parse_floats, read_kv, write_kv
from .metrics import DEFAULT_COVERAGE_LEVELS, evaluate
from .model import HybridForecaster, ModelConfig
from .params import load_store, save_store
from .rng import Stream
from .synth import SynthConfig, synthesize
from .train import TrainingAborted, train
from .workflow import Prepared, prepare, rolling_forecasts

log = logging.getLogger("hcf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "HCF_SEED"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    hidden_size: int = 100
    latent_size: int = 50
    K: int = 5
    T_past: int = 168
    tau: int = 24
    std_floor: float = 1e-4
    n_types: int = 2
    # training
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    holdout: int = 672
    # forecasting and evaluation
    samples: int = 1000
    levels: list[float] = field(default_factory=lambda: list(DEFAULT_LEVELS))
    coverage_levels: list[float] = field(default_factory=lambda: list(DEFAULT_COVERAGE_LEVELS))
    stride: int = 0  # 0 means one horizon

    def model_config(self, D: int, C: int) -> ModelConfig:
        return ModelConfig(D=D, C=C, hidden_size=self.hidden_size, latent_size=self.latent_size, K=self.K,
                           T_past=self.T_past, tau=self.tau, std_floor=self.std_floor)


def _number(text: str) -> float:
    """Float, also accepting a ``num/den`` fraction such as ``1/24``."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _coerce(kind, text):
    if isinstance(text, str):
        if kind == "list[float]":
            return parse_floats(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return _number(text)
    return text


def _typed(cls, items: dict) -> dict:
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in items.items():
        key = k.replace("-", "_")
        if key not in kinds:
            continue
        try:
            out[key] = _coerce(kinds[key], v)
        except ValueError:
            raise UsageError(f"bad value for {k}: {v!r}") from None
    return out


def _file_settings(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        items = read_kv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    known = {f.name for f in fields(RunConfig)} | {f.name for f in fields(SynthConfig)}
    unknown = sorted(k for k in items if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    return items


def _flag_settings(args, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _env_seed() -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return {}
    try:
        return {"seed": int(raw)}
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve(cls, args, base: dict | None = None):
    """Build ``cls`` from defaults, ``base``, the config file, HCF_SEED and flags."""
    merged = dict(base or {})
    merged.update(_typed(cls, _file_settings(args)))
    merged.update(_env_seed() if "seed" in {f.name for f in fields(cls)} else {})
    merged.update(_flag_settings(args, cls))
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _header(command: str, settings: dict) -> str:
    return f"hcf {command} config-hash: {config_hash(settings)}"


# checkpoint directory -----------------------------------------------------------

PARAMS, MODEL_CFG, SCALER_CFG, STATE_CFG, LOSS_TRACE = "params.bin", "model.cfg", "scaler.cfg", "state.cfg", "loss.csv"


@dataclass
class Checkpoint:
    model: HybridForecaster
    scaler: Scaler
    state: dict

    @property
    def anchor(self):
        return np.datetime64(self.state["anchor_start"], "s"), np.datetime64(self.state["anchor_end"], "s")

    def save(self, directory: Path, header: str) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        save_store(directory / PARAMS, self.model.store)
        write_kv(directory / MODEL_CFG, self.model.config.to_kv(), header)
        write_kv(directory / SCALER_CFG, self.scaler.to_kv(), header)
        write_kv(directory / STATE_CFG, self.state, header)

    @classmethod
    def load(cls, directory: Path) -> "Checkpoint":
        for name in (PARAMS, MODEL_CFG, SCALER_CFG, STATE_CFG):
            if not (directory / name).is_file():
                raise DataError(f"checkpoint {directory} is missing {name}")
        try:
            cfg = ModelConfig.from_kv(read_kv(directory / MODEL_CFG))
            store = load_store(directory / PARAMS)
            model = HybridForecaster(cfg, store=store)
        except (ValueError, KeyError) as exc:
            raise DataError(f"checkpoint {directory}: {exc}") from None
        return cls(model, Scaler.from_kv(read_kv(directory / SCALER_CFG)), read_kv(directory / STATE_CFG))


def _load_inputs(series_path, events_path):
    series = load_series(series_path)
    events = load_events(events_path) if events_path else None
    return series, events


# commands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve(SynthConfig, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series, events = synthesize(cfg)
    header = _header("synth", cfg.to_kv())
    write_series(out / "series.csv", series, header)
    write_events(out / "events.csv", events, header)
    write_kv(out / "synth.cfg", cfg.to_kv(), header)
    print(f"wrote {series.length} points and {len(events)} events to {out}")
    return EXIT_OK


def cmd_extract_events(args) -> int:
    series = load_series(args.series)
    variable = int(args.variable) if args.variable.isdigit() else args.variable
    try:
        threshold = float(args.threshold)
    except ValueError:
        raise UsageError(f"bad threshold {args.threshold!r}") from None
    if not threshold > 0:
        raise UsageError("threshold must be positive")
    events = extract(series, variable, threshold)
    name = series.variable_names[series.variable_index(variable)]
    write_events(args.out, events, _header("extract-events", {"variable": name, "threshold": threshold}))
    for type_name, n in events.counts().items():
        print(f"{type_name}: {n}")
    return EXIT_OK


def _prepare_for(series: RawSeries, events: RawEvents | None, cfg: ModelConfig, holdout: int,
                 scaler=None, anchor=None) -> Prepared:
    return prepare(series, events, cfg.T_past, cfg.tau, holdout, n_types=cfg.C, scaler=scaler, anchor=anchor)


def cmd_train(args) -> int:
    ckdir = Path(args.checkpoint)
    series, events = _load_inputs(args.series, args.events)
    if args.resume:
        ck = Checkpoint.load(ckdir)
        run = resolve(RunConfig, args, {"seed": int(ck.state["seed"]), "holdout": int(ck.state["holdout"]),
                                        "batch_size": int(ck.state["batch_size"]), "lr": float(ck.state["lr"])})
        model, done = ck.model, int(ck.state["epochs_done"])
        if ck.state["events"] != ("yes" if events is not None else "no"):
            raise UsageError("resume must use the same event input as the original run")
        prep = _prepare_for(series, events, model.config, run.holdout, ck.scaler, ck.anchor)
    else:
        run = resolve(RunConfig, args)
        C = events.n_types if events is not None else run.n_types
        cfg = run.model_config(series.dim, C)
        model = HybridForecaster(cfg, rng=Stream(run.seed))
        done = 0
        prep = _prepare_for(series, events, cfg, run.holdout)
        if (ckdir / LOSS_TRACE).exists():
            (ckdir / LOSS_TRACE).unlink()
    settings = {**model.config.to_kv(), "seed": run.seed, "holdout": run.holdout, "batch_size": run.batch_size,
                "lr": run.lr, "events": "yes" if events is not None else "no"}
    header = _header("train", settings)
    ckdir.mkdir(parents=True, exist_ok=True)
    trace_path = ckdir / LOSS_TRACE
    if not trace_path.exists():
        trace_path.write_text(f"# {header}\nepoch,neg_elbo\n", encoding="utf-8")

    def state(epochs_done: int) -> dict:
        return {
            "epochs_done": epochs_done, "seed": run.seed, "holdout": run.holdout, "batch_size": run.batch_size,
            "lr": run.lr, "events": settings["events"],
            "anchor_start": str(prep.anchor[0]), "anchor_end": str(prep.anchor[1]),
            "variables": ",".join(series.variable_names),
        }

    def on_epoch(epoch: int, loss: float) -> None:
        with open(trace_path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch},{loss!r}\n")
        Checkpoint(model, prep.scaler, state(epoch)).save(ckdir, header)
        print(f"epoch {epoch}: neg-elbo {loss:.6f}")

    Checkpoint(model, prep.scaler, state(done)).save(ckdir, header)
    train(model, prep.dataset, run.epochs, batch_size=run.batch_size, lr=run.lr,
          rng=Stream(run.seed).split("train"), train_end=prep.train_end, start_epoch=done, on_epoch=on_epoch)
    return EXIT_OK


def _stamp(ts) -> str:
    return str(np.datetime64(ts, "s")).replace("-", "").replace(":", "")


def write_forecast(out: Path, ens: ForecastEnsemble, stamps: np.ndarray, names: list[str], header: str) -> Path:
    path = out / f"forecast_{_stamp(stamps[0])}.csv"
    levels = ens.levels
    lines = [f"# {header}", ",".join(["timestamp", "variable", "mean", *(f"q{p!r}" for p in levels)])]
    for t, ts in enumerate(np.datetime_as_string(stamps, unit="s")):
        for d, name in enumerate(names):
            row = [ts, name, repr(float(ens.mean[t, d]))] + [repr(float(ens.quantiles[p][t, d])) for p in levels]
            lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "samples").mkdir(exist_ok=True)
    np.save(out / "samples" / (path.stem + ".npy"), ens.samples)
    return path


def _origin_index(series: RawSeries, text: str) -> int:
    try:
        ts = np.datetime64(text, "s")
    except ValueError:
        raise UsageError(f"bad origin timestamp {text!r}") from None
    pos = float(series.index_time(ts)) - 1.0
    if pos != round(pos):
        raise DataError(f"origin {text} is not on the series sampling grid")
    return int(round(pos))


def cmd_forecast(args) -> int:
    ck = Checkpoint.load(Path(args.checkpoint))
    series, events = _load_inputs(args.series, args.events)
    run = resolve(RunConfig, args, {"seed": int(ck.state["seed"]), "holdout": int(ck.state["holdout"])})
    model, cfg = ck.model, ck.model.config
    if series.dim != cfg.D:
        raise DataError(f"series has {series.dim} variables, checkpoint expects {cfg.D}")
    prep = _prepare_for(series, events, cfg, run.holdout, ck.scaler, ck.anchor)
    rng = Stream(run.seed).split("forecast")
    flags = {"mean_feedback": args.mean_feedback}
    if args.rolling:
        ensembles = rolling_forecasts(model, prep, run.samples, rng, run.stride or None, **flags)
    else:
        first = _origin_index(series, args.origin)
        start = first - cfg.T_past
        if start < 0:
            raise DataError(f"origin {args.origin} has only {first} past samples, need {cfg.T_past}")
        if first > series.length:
            raise DataError(f"origin {args.origin} lies beyond the step after the last sample")
        ensembles = [forecast(model, prep.dataset, start, run.samples, rng.split("origin", start), prep.scaler,
                              **flags)]
    settings = {**cfg.to_kv(), "seed": run.seed, "samples": run.samples, "levels": run.levels,
                "stride": run.stride, "events": "yes" if events is not None else "no",
                "mean_feedback": args.mean_feedback}
    header = _header("forecast", settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamps_all = np.concatenate([series.timestamps, series.timestamps_after(cfg.tau)])
    for ens in ensembles:
        mean, quantiles = summarize(ens.samples, run.levels)
        ens = ForecastEnsemble(ens.samples, mean, quantiles, ens.start)
        first = ens.start + cfg.T_past
        write_forecast(out, ens, stamps_all[first:first + cfg.tau], series.variable_names, header)
    print(f"wrote {len(ensembles)} forecast file(s) to {out}")
    return EXIT_OK


def read_forecast_dir(directory: Path, series: RawSeries):
    """(ensembles, truths) for every forecast file in ``directory``, aligned to ``series``."""
    files = sorted(directory.glob("forecast_*.csv"))
    if not files:
        raise DataError(f"no forecast files in {directory}")
    ensembles, truths = [], []
    for path in files:
        stamps = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#") or line.startswith("timestamp,"):
                continue
            ts = line.split(",", 1)[0]
            if not stamps or stamps[-1] != ts:
                stamps.append(ts)
        samples_path = directory / "samples" / (path.stem + ".npy")
        if not samples_path.is_file():
            raise DataError(f"missing samples file {samples_path}")
        samples = np.load(samples_path)
        pos = series.index_time(np.array(stamps, dtype="datetime64[s]")) - 1.0
        idx = np.round(pos).astype(np.int64)
        if (np.any(pos != idx) or np.any(idx < 0) or np.any(idx >= series.length)
                or np.any(np.diff(idx) != 1) or samples.shape[1:] != (len(idx), series.dim)):
            raise DataError(f"{path.name}: forecast times are not aligned with the truth series")
        ensembles.append(samples)
        truths.append(series.values[idx])
    return ensembles, truths


def cmd_evaluate(args) -> int:
    run = resolve(RunConfig, args)
    series = load_series(args.series)
    ens, truths = read_forecast_dir(Path(args.forecasts), series)
    report = evaluate(ens, truths, series.variable_names, run.coverage_levels)
    header = _header("evaluate", {"coverage_levels": run.coverage_levels})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.cfg", out / "coverage.csv", header)
    print(f"windows {report.n_windows}  rmse {report.rmse:.6f}  crps {report.crps:.6f}  "
          f"calibration_r2 {report.calibration_r2:.4f}")
    if args.baseline:
        b_ens, b_truths = read_forecast_dir(Path(args.baseline), series)
        base = evaluate(b_ens, b_truths, series.variable_names, run.coverage_levels)
        ratio = report.crps / base.crps if base.crps > 0 else math.inf
        write_kv(out / "comparison.cfg", {"crps": report.crps, "baseline_crps": base.crps, "crps_ratio": ratio,
                                          "rmse": report.rmse, "baseline_rmse": base.rmse}, header)
        print(f"baseline crps {base.crps:.6f}  crps ratio {ratio:.4f}")
    return EXIT_OK


# parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p, groups):
    if "model" in groups:
        g = p.add_argument_group("model")
        g.add_argument("--hidden-size", type=int)
        g.add_argument("--latent-size", type=int)
        g.add_argument("--K", "--k", dest="K", type=int, help="latent samples per training window")
        g.add_argument("--T-past", "--t-past", dest="T_past", type=int, help="past window length")
        g.add_argument("--tau", type=int, help="forecast horizon")
        g.add_argument("--std-floor", type=float)
        g.add_argument("--n-types", type=int, help="event types when no events file is given")
    if "train" in groups:
        g = p.add_argument_group("training")
        g.add_argument("--epochs", type=int)
        g.add_argument("--batch-size", type=int)
        g.add_argument("--lr", type=float)
        g.add_argument("--holdout", type=int, help="trailing points kept out of training")
    if "seed" in groups:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcf", description="Event-conditioned probabilistic forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic series and its events")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        kind = {"int": int, "str": str}.get(f.type, _number)
        if f.name == "magnitudes":
            kind = parse_floats
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)
    _add_run_flags(p, {"seed"})
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-events", help="threshold first differences into up/down events")
    p.add_argument("--series", required=True)
    p.add_argument("--variable", default="0", help="variable name or column index")
    p.add_argument("--threshold", default="30")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_events)

    p = sub.add_parser("train", help="fit a model and write a checkpoint directory")
    p.add_argument("--series", required=True)
    p.add_argument("--events", help="omit to train without events")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.add_argument("--config")
    _add_run_flags(p, {"model", "train", "seed"})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="Monte-Carlo forecasts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--events", help="omit to forecast without events")
    p.add_argument("--out", required=True)
    where = p.add_mutually_exclusive_group(required=True)
    where.add_argument("--origin", help="timestamp of the first forecast step")
    where.add_argument("--rolling", action="store_true", help="every origin in the held-out range")
    p.add_argument("--stride", type=int, help="steps between rolling origins (default: horizon)")
    p.add_argument("--samples", type=int)
    p.add_argument("--levels", type=parse_floats, help="comma-separated quantile levels")
    p.add_argument("--holdout", type=int)
    p.add_argument("--mean-feedback", action="store_true", help="diagnostic: feed back the predicted mean")
    p.add_argument("--config")
    _add_run_flags(p, {"seed"})
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score forecast files against the series")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", help="second forecast directory; prints the CRPS ratio")
    p.add_argument("--coverage-levels", type=parse_floats)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hcf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"hcf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"hcf: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hcf: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
