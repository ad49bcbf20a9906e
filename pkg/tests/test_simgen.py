import time

import numpy as np
import pytest

from ratefactor.core import CountMatrix, DataError
from ratefactor.simgen import (
    AddParams,
    MulParams,
    fit_two_way_gaussian,
    generate_add,
    generate_mul,
    load_demo_params,
    params_from_json,
    params_to_json,
    simulate,
)


def _flat_mul(m=4, a=1.0, b=0.0, sd=0.0):
    return MulParams(np.full(5, a), b, sd, np.full((5, m), 1.0 / m))


def test_mul_constant_path():
    sim = generate_mul(_flat_mul(m=4), 10, seed=0)
    np.testing.assert_allclose(sim.rates, 1 / 16, rtol=1e-14)


def test_mul_seasonal_only():
    p = MulParams(np.arange(10.0, 15.0), 0.0, 0.0, np.full((5, 3), 1 / 3))
    sim = generate_mul(p, 15, seed=1)
    for d in range(1, 6):
        rows = sim.rates[sim.counts.day_labels == d]
        np.testing.assert_array_equal(rows, np.tile(rows[0], (rows.shape[0], 1)))


def test_mul_moment_check():
    p = MulParams(np.full(5, 40.0), 0.0, 0.0, np.full((5, 4), 0.25))
    lam = 100.0
    draws = np.stack([generate_mul(p, 5, seed=s).counts.values for s in range(200)])
    mean = draws.mean(axis=0)
    assert np.all(np.abs(mean - lam) < 3 * np.sqrt(lam / 200))


def _zero_add(m, mu):
    return AddParams(mu, np.zeros(5), 0.0, 0.0, np.zeros(m), np.zeros((5, m)))


def test_add_constant():
    sim = generate_add(_zero_add(6, 3.0), 7, seed=2)
    np.testing.assert_allclose(sim.rates, 9.0)


def test_add_antisymmetric_pair():
    p = AddParams(5.0, np.zeros(5), 0.0, 0.0, np.array([2.0, -2.0]), np.zeros((5, 2)))
    sim = generate_add(p, 3, seed=0)
    np.testing.assert_allclose(sim.rates[0], [49.0, 9.0])


def test_add_clamps_negative_roots():
    p = AddParams(1.0, np.zeros(5), 0.0, 0.0, np.array([3.0, -3.0]), np.zeros((5, 2)))
    sim = generate_add(p, 4, seed=0)
    assert sim.clamped_cells == 4
    assert np.all(sim.rates > 0)


def test_demo_generation_fast_and_valid():
    for kind in ("MUL", "ADD"):
        p = load_demo_params(kind)
        t0 = time.perf_counter()
        sim = simulate(p, 200, seed=9)
        assert time.perf_counter() - t0 < 1.0
        assert sim.counts.values.shape == (200, 68)
        assert np.all(sim.rates > 0) and np.all(np.isfinite(sim.rates))
        assert sim.counts.interval_labels[0] == "07:00"


def test_generation_is_seeded():
    p = load_demo_params("MUL")
    a, b = simulate(p, 30, seed=4), simulate(p, 30, seed=4)
    np.testing.assert_array_equal(a.counts.values, b.counts.values)
    assert not np.array_equal(a.counts.values, simulate(p, 30, seed=5).counts.values)


@pytest.mark.parametrize("kind", ["MUL", "ADD"])
def test_params_json_round_trip(kind):
    p = load_demo_params(kind)
    text = params_to_json(p)
    assert params_to_json(params_from_json(text)) == text


def test_param_validation():
    with pytest.raises(DataError):
        MulParams(np.ones(5), 0.5, 1.0, np.full((5, 3), 0.5))
    with pytest.raises(DataError):
        AddParams(1.0, np.zeros(5), 0.0, 0.0, np.array([1.0, 1.0]), np.zeros((5, 2)))
    with pytest.raises(DataError):
        params_from_json('{"model": "XYZ"}')


def test_mul_fit_recovers_profiles():
    p = load_demo_params("MUL")
    p = MulParams(p.day_intercepts * 20, p.ar_slope, 0.0, p.day_profiles)
    sim = generate_mul(p, 150, seed=6)
    fit = fit_two_way_gaussian(sim.counts, "MUL")
    rel = np.abs(fit.profiles - p.day_profiles) / p.day_profiles
    assert np.max(rel) < 0.01


def test_constant_counts_mul_fit():
    cm = CountMatrix(np.full((20, 4), 16), [(i % 5) + 1 for i in range(20)])
    fit = fit_two_way_gaussian(cm, "MUL")
    np.testing.assert_allclose(fit.profiles, 0.25, rtol=1e-14)
    np.testing.assert_allclose(fit.day_means, fit.day_means[0], rtol=1e-14)
    fc = fit.forecast()
    np.testing.assert_allclose(fc, fc[0], rtol=1e-14)


def test_two_way_needs_history():
    cm = CountMatrix(np.ones((10, 3)), [(i % 5) + 1 for i in range(10)])
    with pytest.raises(DataError):
        fit_two_way_gaussian(cm, "ADD")
