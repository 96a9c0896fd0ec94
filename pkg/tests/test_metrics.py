import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from hcf.metrics import (
    calibration_r2,
    coverage_curve,
    crps_average,
    crps_empirical,
    crps_energy,
    crps_gaussian,
    evaluate,
    mae,
    rmse,
)


def crps_quadrature(mu, sigma, x):
    """Integrate (Phi((y - mu)/sigma) - 1{y >= x})^2 numerically, split at x."""
    left = integrate.quad(lambda y: norm.cdf((y - mu) / sigma) ** 2, -np.inf, x, epsabs=1e-12, epsrel=1e-12)[0]
    right = integrate.quad(lambda y: norm.sf((y - mu) / sigma) ** 2, x, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
    return left + right


def crps_step_bruteforce(samples, x, n_grid=400_001):
    """Riemann sum of the step-CDF integrand on a fine grid."""
    s = np.sort(samples)
    lo, hi = min(s[0], x) - 1.0, max(s[-1], x) + 1.0
    y = np.linspace(lo, hi, n_grid)
    F = np.searchsorted(s, y, side="right") / len(s)
    H = (y >= x).astype(float)
    return np.trapezoid((F - H) ** 2, y)


def test_crps_gaussian_standard_value():
    expected = 2 * norm.pdf(0.0) - 1 / math.sqrt(math.pi)
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(expected, abs=1e-15)
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-5)
    assert crps_quadrature(0.0, 1.0, 0.0) == pytest.approx(expected, abs=1e-6)


def test_crps_gaussian_deterministic_limit():
    assert crps_gaussian(1.0, 1e-8, 3.0) == pytest.approx(2.0, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(0, 5))
def test_crps_gaussian_symmetric(mu, sigma, a):
    assert crps_gaussian(mu, sigma, mu + a) == pytest.approx(crps_gaussian(mu, sigma, mu - a), abs=1e-12)


def test_crps_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        crps_gaussian(0.0, 0.0, 1.0)


def test_crps_gaussian_matches_quadrature_grid():
    for mu in np.linspace(-3, 3, 4):
        for sigma in np.linspace(0.1, 3, 4):
            for x in np.linspace(-3, 3, 4):
                assert abs(crps_gaussian(mu, sigma, x) - crps_quadrature(mu, sigma, x)) < 1e-6


def test_crps_empirical_point_mass():
    assert crps_empirical([2.0, 2.0, 2.0], 5.0) == pytest.approx(3.0, abs=1e-15)


def test_crps_empirical_two_points():
    assert crps_step_bruteforce(np.array([0.0, 1.0]), 0.0) == pytest.approx(0.25, abs=1e-5)
    assert crps_empirical([0.0, 1.0], 0.0) == pytest.approx(0.25, abs=1e-15)


def test_crps_empirical_matches_riemann_sum():
    rng = np.random.default_rng(5)
    for _ in range(5):
        s, x = rng.normal(size=7), rng.normal()
        assert crps_empirical(s, x) == pytest.approx(crps_step_bruteforce(s, x), abs=1e-4)


def test_crps_empirical_converges_to_gaussian():
    draws = np.random.default_rng(0).normal(size=100_000)
    assert abs(crps_empirical(draws, 0.0) - crps_gaussian(0.0, 1.0, 0.0)) < 0.01


def test_crps_empirical_rejects_empty():
    with pytest.raises(ValueError):
        crps_empirical(np.zeros(0), 0.0)


def test_energy_form_double_loop():
    rng = np.random.default_rng(1)
    s, x = rng.normal(size=9), 0.3
    pairs = np.mean([abs(a - b) for a in s for b in s])
    direct = np.mean(np.abs(s - x)) - 0.5 * pairs
    assert crps_energy(s, x) == pytest.approx(direct, abs=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-60, 60))
def test_step_integral_equals_energy_form(samples, x):
    assert abs(crps_empirical(samples, x) - crps_energy(samples, x)) < 1e-10


def test_vectorised_cells_match_scalar():
    rng = np.random.default_rng(2)
    s, x = rng.normal(size=(20, 3, 2)), rng.normal(size=(3, 2))
    out = crps_empirical(s, x)
    for idx in np.ndindex(3, 2):
        assert out[idx] == pytest.approx(crps_empirical(s[(slice(None),) + idx], x[idx]), abs=1e-14)


def test_crps_average():
    rng = np.random.default_rng(3)
    f, x = [rng.normal(size=15)], [0.4]
    assert crps_average(f, x) == crps_empirical(f[0], 0.4)
    points, truths = [1.0, -2.0, 0.5], [0.0, 1.0, 0.5]
    assert crps_average(points, truths) == pytest.approx(mae(truths, points), abs=1e-8)
    many = [rng.normal(size=5) for _ in range(4)]
    t = list(rng.normal(size=4))
    perm = [2, 0, 3, 1]
    assert crps_average(many, t) == pytest.approx(crps_average([many[i] for i in perm], [t[i] for i in perm]), abs=1e-15)
    with pytest.raises(ValueError):
        crps_average(many, t[:2])


def test_rmse():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(24, 3))
    assert rmse(a, a) == 0.0
    assert rmse(a, a + 0.7) == pytest.approx(0.7, abs=1e-12)
    b = rng.normal(size=(24, 3))
    total = 0.0
    for t in range(24):
        for d in range(3):
            total += (a[t, d] - b[t, d]) ** 2
    assert abs(rmse(a, b) - math.sqrt(total / 72)) < 1e-12
    with pytest.raises(ValueError):
        rmse(a, b[:3])


def test_coverage_extremes():
    samples = np.random.default_rng(0).normal(size=(50, 4, 2))
    low, high = np.full((4, 2), -100.0), np.full((4, 2), 100.0)
    assert all(c == 1.0 for _, c in coverage_curve([samples], [low]))
    assert all(c == 0.0 for _, c in coverage_curve([samples], [high]))


def test_coverage_calibrated_within_binomial_noise():
    rng = np.random.default_rng(8)
    n_cells = 4000
    ens = [rng.normal(size=(500, n_cells))]
    truth = [rng.normal(size=n_cells)]
    for p, c in coverage_curve(ens, truth):
        # quantile estimation noise from 500 members adds a little on top of the binomial term
        assert abs(c - p) < 3 * math.sqrt(p * (1 - p) / n_cells) + 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_coverage_monotone(seed):
    rng = np.random.default_rng(seed)
    curve = coverage_curve([rng.normal(size=(20, 6))], [rng.normal(size=6) * 2])
    covs = [c for _, c in curve]
    assert all(b >= a for a, b in zip(covs, covs[1:]))
    assert all(0 <= c <= 1 for c in covs)


def test_calibration_r2():
    levels = np.arange(1, 10) / 10
    assert calibration_r2([(p, p) for p in levels]) == 1.0
    flat = calibration_r2([(p, 0.5) for p in levels])
    expected = 1 - np.sum((0.5 - levels) ** 2) / np.sum((levels - levels.mean()) ** 2)
    assert flat == expected == 0.0
    assert calibration_r2([(p, 0.9) for p in levels]) < 0
    with pytest.raises(ValueError):
        calibration_r2([(0.5, 0.5)])
    with pytest.raises(ValueError):
        calibration_r2([(0.5, 0.2), (0.5, 0.7)])


def test_evaluate_perfect_forecast():
    truth = np.random.default_rng(1).normal(size=(6, 2))
    ens = np.repeat(truth[None], 3, axis=0)
    rep = evaluate([ens, ens], [truth, truth], ["a", "b"])
    # the ensemble mean of identical members can differ from them by one ulp
    assert rep.rmse < 1e-15 and rep.mae < 1e-15
    assert rep.crps == 0.0
    assert set(rep.per_variable) == {"a", "b"}


def test_metrics_scale_with_data_units():
    rng = np.random.default_rng(6)
    ens, truth = rng.normal(size=(200, 6, 1)), rng.normal(size=(6, 1))
    a = evaluate([ens], [truth])
    b = evaluate([ens * 10], [truth * 10])
    assert b.crps == pytest.approx(10 * a.crps, rel=1e-12)
    assert b.rmse == pytest.approx(10 * a.rmse, rel=1e-12)
    assert b.calibration_r2 == pytest.approx(a.calibration_r2, abs=1e-12)
