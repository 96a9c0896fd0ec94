import subprocess
import sys
import time

import numpy as np
import pytest

from hcf.cli import main, read_forecast_dir, write_forecast
from hcf.data import RawSeries, load_events, load_series, write_series
from hcf.forecast import ForecastEnsemble, summarize
from hcf.kvfile import read_kv

TINY = ["--hidden-size", "8", "--latent-size", "4", "--T-past", "24", "--tau", "12", "--holdout", "120"]


def run(*argv):
    return main([str(a) for a in argv])


def files_equal(a, b):
    return a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """A 600-point synthetic set and a two-epoch checkpoint trained on it."""
    root = tmp_path_factory.mktemp("small")
    assert run("synth", "--out", root / "data", "--length", 600, "--delay", 6) == 0
    assert run("train", "--series", root / "data/series.csv", "--events", root / "data/events.csv",
               "--checkpoint", root / "ck", "--epochs", 2, *TINY) == 0
    return root


def test_synth_is_reproducible(tmp_path, small):
    assert run("synth", "--out", tmp_path / "a", "--length", 600, "--delay", 6) == 0
    for name in ("series.csv", "events.csv", "synth.cfg"):
        assert files_equal(tmp_path / "a" / name, small / "data" / name)
    assert run("synth", "--out", tmp_path / "b", "--length", 600, "--delay", 6, "--seed", 1) == 0
    assert not files_equal(tmp_path / "b/series.csv", small / "data/series.csv")


def test_seed_precedence(tmp_path, monkeypatch):
    (tmp_path / "s.cfg").write_text("length = 100\nseed = 1\nrate = 1/12\n")
    run("synth", "--out", tmp_path / "file", "--config", tmp_path / "s.cfg")
    run("synth", "--out", tmp_path / "s1", "--length", 100, "--rate", "1/12", "--seed", 1)
    run("synth", "--out", tmp_path / "s2", "--length", 100, "--rate", "1/12", "--seed", 2)
    run("synth", "--out", tmp_path / "s3", "--length", 100, "--rate", "1/12", "--seed", 3)
    assert files_equal(tmp_path / "file/series.csv", tmp_path / "s1/series.csv")
    monkeypatch.setenv("HCF_SEED", "2")
    run("synth", "--out", tmp_path / "env", "--config", tmp_path / "s.cfg")
    assert files_equal(tmp_path / "env/series.csv", tmp_path / "s2/series.csv")
    run("synth", "--out", tmp_path / "flag", "--config", tmp_path / "s.cfg", "--seed", 3)
    assert files_equal(tmp_path / "flag/series.csv", tmp_path / "s3/series.csv")


def test_config_errors_are_usage_errors(tmp_path, monkeypatch):
    (tmp_path / "bad.cfg").write_text("no_such_key = 3\n")
    assert run("synth", "--out", tmp_path, "--config", tmp_path / "bad.cfg") == 1
    assert run("synth", "--out", tmp_path, "--config", tmp_path / "missing.cfg") == 1
    monkeypatch.setenv("HCF_SEED", "abc")
    assert run("synth", "--out", tmp_path) == 1


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--series", "x.csv")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    proc = subprocess.run([sys.executable, "-m", "hcf", "forecast", "--checkpoint", "x"], capture_output=True)
    assert proc.returncode == 1


def test_data_errors_exit_two(tmp_path, small):
    (tmp_path / "gap.csv").write_text("timestamp,v\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,2\n2020-01-01T03:00:00,2\n")
    assert run("extract-events", "--series", tmp_path / "gap.csv", "--out", tmp_path / "e.csv") == 2
    assert run("extract-events", "--series", small / "data/series.csv", "--variable", "nope",
               "--out", tmp_path / "e.csv") == 2
    assert run("forecast", "--checkpoint", tmp_path / "none", "--series", small / "data/series.csv",
               "--out", tmp_path / "f", "--rolling") == 2
    # origin with too little history
    assert run("forecast", "--checkpoint", small / "ck", "--series", small / "data/series.csv",
               "--out", tmp_path / "f", "--origin", "2014-01-06T05:00:00") == 2


def test_numerical_abort_exits_three(tmp_path, small):
    code = run("train", "--series", small / "data/series.csv", "--checkpoint", tmp_path / "ck",
               "--epochs", 3, "--lr", "1e300", *TINY)
    assert code == 3


def spiky(n=400, seed=0):
    rng = np.random.default_rng(seed)
    v = 100 + rng.normal(scale=0.5, size=n)
    v[50:60] += 15  # jump up then back down
    v[200] -= 20  # one-sample dip
    stamps = np.datetime64("2015-01-01T00:00:00", "s") + np.timedelta64(900, "s") * np.arange(n)
    return RawSeries(stamps, v[:, None], ["occupancy"])


def test_extract_events_on_spikes(tmp_path, capsys):
    write_series(tmp_path / "s.csv", spiky())
    assert run("extract-events", "--series", tmp_path / "s.csv", "--variable", "occupancy",
               "--threshold", 10, "--out", tmp_path / "e.csv") == 0
    out = capsys.readouterr().out
    assert "up: 2" in out and "down: 2" in out
    ev = load_events(tmp_path / "e.csv")
    assert ev.counts() == {"up": 2, "down": 2}
    run("extract-events", "--series", tmp_path / "s.csv", "--threshold", 10, "--out", tmp_path / "e2.csv")
    assert files_equal(tmp_path / "e.csv", tmp_path / "e2.csv")
    assert run("extract-events", "--series", tmp_path / "s.csv", "--threshold", "inf",
               "--out", tmp_path / "none.csv") == 0
    assert len(load_events(tmp_path / "none.csv")) == 0


def test_train_writes_checkpoint_and_trace(small):
    ck = small / "ck"
    for name in ("params.bin", "model.cfg", "scaler.cfg", "state.cfg", "loss.csv"):
        assert (ck / name).is_file()
    assert read_kv(ck / "state.cfg")["epochs_done"] == "2"
    rows = [r for r in (ck / "loss.csv").read_text().splitlines() if not r.startswith("#")]
    assert rows[0] == "epoch,neg_elbo" and len(rows) == 3
    assert (ck / "model.cfg").read_text().startswith("# hcf train config-hash: ")


def test_same_seed_same_checkpoint_and_resume(tmp_path, small):
    data = small / "data"
    base = ["train", "--series", data / "series.csv", "--events", data / "events.csv", *TINY]
    assert run(*base, "--checkpoint", tmp_path / "again", "--epochs", 2) == 0
    for name in ("params.bin", "model.cfg", "scaler.cfg", "state.cfg", "loss.csv"):
        assert files_equal(tmp_path / "again" / name, small / "ck" / name), name

    assert run(*base, "--checkpoint", tmp_path / "straight", "--epochs", 3) == 0
    assert run(*base, "--checkpoint", tmp_path / "split", "--epochs", 1) == 0
    assert run("train", "--series", data / "series.csv", "--events", data / "events.csv",
               "--checkpoint", tmp_path / "split", "--resume", "--epochs", 2) == 0
    for name in ("params.bin", "loss.csv", "state.cfg"):
        assert files_equal(tmp_path / "straight" / name, tmp_path / "split" / name), name


def test_rate_zero_events_file_is_accepted(tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--length", 300, "--rate", 0) == 0
    assert len(load_events(tmp_path / "d/events.csv")) == 0
    assert run("train", "--series", tmp_path / "d/series.csv", "--events", tmp_path / "d/events.csv",
               "--checkpoint", tmp_path / "ck", "--epochs", 1, *TINY) == 0
    assert run("forecast", "--checkpoint", tmp_path / "ck", "--series", tmp_path / "d/series.csv",
               "--events", tmp_path / "d/events.csv", "--out", tmp_path / "f", "--rolling",
               "--samples", 5) == 0


def test_single_origin_single_sample(tmp_path, small):
    assert run("forecast", "--checkpoint", small / "ck", "--series", small / "data/series.csv",
               "--events", small / "data/events.csv", "--out", tmp_path, "--origin", "2014-01-27T00:00:00",
               "--samples", 1) == 0
    (csv,) = tmp_path.glob("forecast_*.csv")
    assert csv.name == "forecast_20140127T000000.csv"
    samples = np.load(tmp_path / "samples" / (csv.stem + ".npy"))
    rows = [r.split(",") for r in csv.read_text().splitlines()[2:]]
    assert len(rows) == 12 and rows[0][0] == "2014-01-27T00:00:00"
    means = np.array([float(r[2]) for r in rows])
    assert np.array_equal(means, samples[0, :, 0])
    for r, s in zip(rows, samples[0, :, 0]):
        assert all(float(q) == s for q in r[3:])


def test_single_origin_matches_rolling_origin(tmp_path, small):
    data = small / "data"
    run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv", "--events", data / "events.csv",
        "--out", tmp_path / "one", "--origin", "2014-01-27T12:00:00", "--samples", 20)
    run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv", "--events", data / "events.csv",
        "--out", tmp_path / "all", "--rolling", "--samples", 20)
    name = "forecast_20140127T120000.csv"
    assert files_equal(tmp_path / "one" / name, tmp_path / "all" / name)


def test_forecast_beyond_series_end(tmp_path, small):
    assert run("forecast", "--checkpoint", small / "ck", "--series", small / "data/series.csv",
               "--out", tmp_path, "--origin", "2014-01-31T00:00:00", "--samples", 3) == 0
    assert (tmp_path / "forecast_20140131T000000.csv").is_file()


def test_forecast_rerun_is_byte_identical_and_blind_mode_differs(tmp_path, small):
    data = small / "data"
    for d in ("a", "b"):
        run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv",
            "--events", data / "events.csv", "--out", tmp_path / d, "--rolling", "--samples", 10)
    run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv",
        "--out", tmp_path / "blind", "--rolling", "--samples", 10)
    names = sorted(p.name for p in (tmp_path / "a").glob("forecast_*.csv"))
    assert len(names) == 10
    for n in names:
        assert files_equal(tmp_path / "a" / n, tmp_path / "b" / n)
    assert any(not files_equal(tmp_path / "a" / n, tmp_path / "blind" / n) for n in names)


def perfect_forecasts(directory, series, starts, tau):
    directory.mkdir(parents=True, exist_ok=True)
    for s in starts:
        truth = series.values[s:s + tau]
        samples = np.repeat(truth[None], 2, axis=0)
        mean, q = summarize(samples)
        write_forecast(directory, ForecastEnsemble(samples, mean, q, s), series.timestamps[s:s + tau],
                       series.variable_names, "test")


GOLDEN_REPORT_KEYS = ["rmse", "crps", "mae", "calibration_r2", "n_windows", "aggregation",
                      "rmse.value", "crps.value", "mae.value"]


def test_evaluate_zero_spread_and_golden_keys(tmp_path, small):
    series = load_series(small / "data/series.csv")
    perfect_forecasts(tmp_path / "fc", series, [480, 492, 504], 12)
    assert run("evaluate", "--forecasts", tmp_path / "fc", "--series", small / "data/series.csv",
               "--out", tmp_path / "ev") == 0
    rep = read_kv(tmp_path / "ev/report.cfg")
    assert list(rep) == GOLDEN_REPORT_KEYS
    assert float(rep["rmse"]) == 0.0 and float(rep["crps"]) == 0.0
    assert rep["n_windows"] == "3" and rep["aggregation"] == "per-window-then-mean"
    curve = (tmp_path / "ev/coverage.csv").read_text().splitlines()
    assert curve[1] == "p,coverage" and len(curve) == 2 + 19
    run("evaluate", "--forecasts", tmp_path / "fc", "--series", small / "data/series.csv", "--out", tmp_path / "ev2")
    assert files_equal(tmp_path / "ev/report.cfg", tmp_path / "ev2/report.cfg")


def test_evaluate_baseline_ratio(tmp_path, small, capsys):
    data = small / "data"
    run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv", "--events", data / "events.csv",
        "--out", tmp_path / "ev_fc", "--rolling", "--samples", 30)
    run("forecast", "--checkpoint", small / "ck", "--series", data / "series.csv",
        "--out", tmp_path / "ts_fc", "--rolling", "--samples", 30)
    capsys.readouterr()
    assert run("evaluate", "--forecasts", tmp_path / "ev_fc", "--series", data / "series.csv",
               "--baseline", tmp_path / "ts_fc", "--out", tmp_path / "ev") == 0
    comp = read_kv(tmp_path / "ev/comparison.cfg")
    assert float(comp["crps_ratio"]) == pytest.approx(float(comp["crps"]) / float(comp["baseline_crps"]))
    assert "crps ratio" in capsys.readouterr().out


def test_evaluate_rejects_misaligned(tmp_path, small):
    series = load_series(small / "data/series.csv")
    perfect_forecasts(tmp_path / "fc", series, [100], 12)
    shifted = RawSeries(series.timestamps + np.timedelta64(3600 * 1000, "s"), series.values, series.variable_names)
    write_series(tmp_path / "shifted.csv", shifted)
    assert run("evaluate", "--forecasts", tmp_path / "fc", "--series", tmp_path / "shifted.csv",
               "--out", tmp_path / "ev") == 2
    fc, truths = read_forecast_dir(tmp_path / "fc", series)
    assert np.array_equal(fc[0][0], truths[0])


def test_rolling_over_28_days_with_default_shape(tmp_path):
    """Default horizon and holdout on a 2000-point set give one file per held-out day."""
    assert run("synth", "--out", tmp_path / "d") == 0
    t0 = time.perf_counter()
    assert run("train", "--series", tmp_path / "d/series.csv", "--events", tmp_path / "d/events.csv",
               "--checkpoint", tmp_path / "ck", "--hidden-size", 8, "--epochs", 5) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 300, f"tiny training took {elapsed:.0f}s"
    assert run("forecast", "--checkpoint", tmp_path / "ck", "--series", tmp_path / "d/series.csv",
               "--events", tmp_path / "d/events.csv", "--out", tmp_path / "f", "--rolling", "--samples", 20) == 0
    assert len(list((tmp_path / "f").glob("forecast_*.csv"))) == 28
    # events omitted: the same checkpoint runs without an event stream
    assert run("forecast", "--checkpoint", tmp_path / "ck", "--series", tmp_path / "d/series.csv",
               "--out", tmp_path / "ts", "--rolling", "--samples", 20) == 0
    assert len(list((tmp_path / "ts").glob("forecast_*.csv"))) == 28
