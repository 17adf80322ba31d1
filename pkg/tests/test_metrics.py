import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratd.config import ExperimentConfig
from ratd.metrics import (ForecastEnsemble, crps, crps_pointwise, evaluate_ensembles, mae, mse,
                          point_forecast)


def crps_by_integration(samples, x, n_grid=400_001):
    """Integral of (F_m(y) - 1{x <= y})^2 over a dense grid, exact on each linear piece."""
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    lo = min(samples.min(), x) - 1.0
    hi = max(samples.max(), x) + 1.0
    # breakpoints make the integrand piecewise constant, so summing exact pieces is exact
    knots = np.unique(np.concatenate([samples, [x, lo, hi]]))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (a + b)
        F = np.mean(samples <= mid)
        H = float(x <= mid)
        total += (F - H) ** 2 * (b - a)
    # dense Riemann check on the same function, as a second opinion
    y = np.linspace(lo, hi, n_grid)
    F = (samples[None, :] <= y[:, None]).mean(axis=1)
    riemann = np.sum((F - (x <= y)) ** 2) * (y[1] - y[0])
    assert abs(riemann - total) < 1e-3
    return total


def test_mse_mae_trivial():
    a = np.random.default_rng(0).normal(size=(4, 3))
    assert mse(a, a) == 0 and mae(a, a) == 0
    assert mse(a + 1, a) == pytest.approx(1.0) and mae(a + 1, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mse(a, a[:2])


def test_mse_against_reference_and_compat():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=50), rng.normal(size=50)
    ref = sum((pi - ti) ** 2 for pi, ti in zip(p, t)) / len(p)
    assert mse(p, t) == pytest.approx(ref, abs=1e-12)
    assert mae(p, t) == pytest.approx(sum(abs(pi - ti) for pi, ti in zip(p, t)) / len(p), abs=1e-12)
    assert mse(p, t, compat=True) == pytest.approx(np.sqrt(mae(p, t)))


def test_crps_two_point_example():
    assert crps(np.array([[0.0], [1.0]]), np.array([0.0])) == pytest.approx(0.25)


def test_crps_perfect_and_single_sample():
    x = np.array([0.3, -1.2])
    assert crps(np.stack([x, x, x]), x) == 0.0
    s = np.array([[0.5, 0.7]])
    assert crps(s, x) == mae(s[0], x)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.floats(-3, 3))
def test_crps_matches_numerical_integration(samples, x):
    got = float(crps_pointwise(np.array(samples), np.float64(x)))
    assert got == pytest.approx(crps_by_integration(samples, x, n_grid=20_001), abs=1e-6)
    assert got >= -1e-15


def test_crps_zero_only_on_point_mass():
    assert crps(np.array([[1.0], [1.0]]), np.array([1.0])) == 0
    assert crps(np.array([[1.0], [1.1]]), np.array([1.0])) > 0


def test_crps_errors():
    with pytest.raises(ValueError):
        crps(np.zeros((0, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ForecastEnsemble(np.full((2, 3, 1), np.nan))


def test_point_forecast_median():
    s = np.array([[[1.0]], [[5.0]], [[2.0]]])[None]  # [1, m=3, h=1, d=1]
    assert point_forecast(s)[0, 0, 0] == 2.0
    assert point_forecast(s, "mean")[0, 0, 0] == pytest.approx(8 / 3)


def test_report_values_and_per_horizon():
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(6, 4, 5, 2))
    truth = rng.normal(size=(6, 5, 2))
    rep = evaluate_ensembles(samples, truth)
    pred = np.median(samples, axis=1)
    assert rep.mse == pytest.approx(np.mean((pred - truth) ** 2))
    assert rep.mae == pytest.approx(np.mean(np.abs(pred - truth)))
    assert len(rep.per_horizon["crps"]) == 5
    assert rep.crps == pytest.approx(np.mean(rep.per_horizon["crps"]))
    one = evaluate_ensembles(samples[:, :1], truth)
    assert one.crps == pytest.approx(one.mae)


def test_report_fingerprint_tracks_config():
    base = ExperimentConfig()
    samples = np.zeros((2, 3, 4, 1))
    truth = np.ones((2, 4, 1))
    a = evaluate_ensembles(samples, truth, config_fingerprint=base.fingerprint())
    b = evaluate_ensembles(samples, truth, config_fingerprint=base.fingerprint())
    c = evaluate_ensembles(samples, truth, config_fingerprint=base.replace(**{"database.k": 5}).fingerprint())
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != c.fingerprint


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["dataset.l", "dataset.h", "database.k", "diffusion.T", "network.channels",
                        "training.batch_size", "eval.num_samples", "seed"]),
       st.integers(2, 50))
def test_config_fingerprint_changes_iff_field_changes(key, value):
    base = ExperimentConfig().replace(**{"network.heads": 1})
    other = base.replace(**{key: value})
    section, _, name = key.partition(".")
    old = getattr(getattr(base, section), name) if name else getattr(base, section)
    assert (other.fingerprint() == base.fingerprint()) == (old == value)
