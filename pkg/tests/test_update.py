import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from ratefactor.core import IDENTITY, LOG, SQRT, CountMatrix, DataError, FactorModel, NumericError
from ratefactor.factor import fit_poisson_glm
from ratefactor.update import (
    PartialDay,
    PenalizedUpdateConfig,
    closed_form_step,
    hp_update,
    one_step_bootstrap_update,
    penalized_objective,
    penalized_update,
    select_omega,
    taylor_weights,
)


def _model(m=20, K=3, seed=0, link=SQRT):
    rng = np.random.default_rng(seed)
    F = np.abs(rng.normal(1.0, 0.3, (m, K)))
    F[:, 1:] -= F[:, 1:].mean(axis=0) * 0.5
    B = np.linalg.qr(rng.normal(size=(30, K)))[0]
    return FactorModel(link, B, F)


def _instance(m0=10, seed=0, link=SQRT):
    fm = _model(seed=seed, link=link)
    rng = np.random.default_rng(seed + 100)
    beta_ts = np.array([4.0, 0.5, -0.3]) if link is not LOG else np.array([1.5, 0.1, 0.05])
    lam = fm.link.inverse(fm.loadings[:m0] @ (beta_ts + rng.normal(0, 0.2, 3)))
    y = rng.poisson(lam)
    return fm, PartialDay(y, m0, 2), beta_ts


# --- quadratic expansion ---------------------------------------------------------

def test_taylor_sqrt_stationary_point():
    w, ys = taylor_weights(SQRT, 9.0, 3.0)
    assert ys == pytest.approx(3.0, abs=1e-15)


def test_taylor_sqrt_scalar():
    w, ys = taylor_weights(SQRT, 4.0, 1.0)
    assert w == 5.0
    assert ys == pytest.approx(1.6, abs=1e-15)


def test_taylor_identity_zero_count_floored():
    w, _ = taylor_weights(IDENTITY, 0.0, 2.0, weight_floor=1e-7)
    assert w == 1e-7


def _loss(link, y, eta):
    lam = link.inverse(eta, floor=False)
    return lam - y * np.log(lam)


@pytest.mark.parametrize("link, y, eta0", [(SQRT, 7.0, 2.2), (SQRT, 0.0, 1.3), (LOG, 5.0, 1.1), (IDENTITY, 6.0, 4.5)])
def test_taylor_matches_finite_differences(link, y, eta0):
    h = 1e-4
    d1 = (_loss(link, y, eta0 + h) - _loss(link, y, eta0 - h)) / (2 * h)
    d2 = (_loss(link, y, eta0 + h) - 2 * _loss(link, y, eta0) + _loss(link, y, eta0 - h)) / h**2
    w, ys = taylor_weights(link, y, eta0, weight_floor=0.0 if y else 1e-300)
    assert 2 * w == pytest.approx(d2, rel=1e-5)
    assert 2 * w * (eta0 - ys) == pytest.approx(d1, rel=1e-6, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(1, 5), m0=st.integers(1, 25), omega=st.sampled_from([0.0, 0.1, 10.0, 1e4]))
def test_closed_form_matches_dense_solve(seed, K, m0, omega):
    rng = np.random.default_rng(seed)
    if omega == 0 and m0 < K:
        m0 = K
    Fe = rng.normal(size=(m0, K))
    w = rng.uniform(0.1, 5, m0)
    ys = rng.normal(size=m0)
    bts = rng.normal(size=K)
    got = closed_form_step(Fe, w, ys, bts, omega)
    A = np.vstack([np.sqrt(w)[:, None] * Fe, np.sqrt(omega) * np.eye(K)])
    b = np.concatenate([np.sqrt(w) * ys, np.sqrt(omega) * bts])
    ref = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(ref).max()))


# --- penalized update ------------------------------------------------------------

def test_zero_penalty_is_ml_fit():
    fm, partial, bts = _instance()
    up = penalized_update(fm, partial, bts, omega=0.0)
    ml = fit_poisson_glm(partial.early_counts, fm.loadings[:10], SQRT, beta0=bts, tol=1e-14)
    np.testing.assert_allclose(up.scores, ml.beta, rtol=1e-6)


def test_huge_penalty_is_anchor():
    fm, partial, bts = _instance()
    up = penalized_update(fm, partial, bts, omega=1e12)
    assert np.linalg.norm(up.scores - bts) <= 1e-4 * np.linalg.norm(bts)


def test_single_factor_grid_search():
    F = np.array([[1.0], [1.5], [2.0], [1.2]])
    fm = FactorModel(SQRT, np.array([[1.0], [0.0]]), F)
    partial = PartialDay(np.array([3, 7]), 2, 1)
    bts, omega = np.array([2.0]), 0.8
    up = penalized_update(fm, partial, bts, omega=omega, cfg=PenalizedUpdateConfig(omega=omega, tol=1e-15))

    def crit(b):
        lam = np.outer(b, F[:2, 0]) ** 2
        return np.sum(lam - partial.early_counts * np.log(lam), axis=1) + omega * (b - bts[0]) ** 2

    coarse = np.linspace(-10, 10, 200_001)
    coarse = coarse[coarse != 0]
    b0 = coarse[np.argmin(crit(coarse))]
    fine = np.linspace(b0 - 1e-4, b0 + 1e-4, 200_001)
    assert up.scores[0] == pytest.approx(fine[np.argmin(crit(fine))], abs=1e-5)


@pytest.mark.parametrize("link", [SQRT, LOG, IDENTITY])
def test_update_matches_generic_optimizer(link):
    fm, partial, bts = _instance(m0=12, seed=4, link=link)
    omega = 3.0
    up = penalized_update(fm, partial, bts, omega=omega)
    Fe = fm.loadings[:12]
    f = lambda b: penalized_objective(link, Fe, partial.early_counts, b, bts, omega)
    ref = optimize.minimize(f, up.scores + 0.05, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000})
    assert up.objective_value <= ref.fun + 1e-8


def test_short_morning_needs_penalty():
    fm, partial, bts = _instance(m0=2)
    with pytest.raises(NumericError):
        penalized_update(fm, partial, bts, omega=0.0)
    up = penalized_update(fm, partial, bts, omega=10.0)
    assert np.all(np.isfinite(up.scores))


def test_loadings_orthonormal_rejected():
    fm, partial, bts = _instance()
    other = FactorModel(SQRT, fm.scores, fm.loadings, normalization="loadings-orthonormal")
    with pytest.raises(DataError):
        penalized_update(other, partial, bts, omega=1.0)


def test_degenerate_ensemble_stays_at_point():
    fm, partial, bts = _instance()
    cfg = PenalizedUpdateConfig(omega=50.0, tol=1e-14)
    up = penalized_update(fm, partial, bts, cfg)
    boot = one_step_bootstrap_update(fm, partial, up, np.tile(bts, (7, 1)), cfg)
    np.testing.assert_allclose(boot.ensemble_scores, np.tile(up.scores, (7, 1)), rtol=1e-7)


def test_zero_penalty_ensemble_ignores_anchor():
    fm, partial, bts = _instance()
    cfg = PenalizedUpdateConfig(omega=0.0)
    up = penalized_update(fm, partial, bts, cfg)
    ens = bts + np.random.default_rng(0).normal(0, 1, (9, 3))
    boot = one_step_bootstrap_update(fm, partial, up, ens, cfg)
    np.testing.assert_allclose(boot.ensemble, np.tile(boot.ensemble[0], (9, 1)), rtol=1e-12)


def test_updated_json_fields():
    fm, partial, bts = _instance()
    up = penalized_update(fm, partial, bts, omega=5.0)
    import json

    doc = json.loads(up.to_json())
    assert doc["m0"] == 10 and doc["omega"] == 5.0 and len(doc["latter_rates"]) == 10


# --- proportional rescaling -------------------------------------------------------

def test_hp_unit_ratio():
    lam = np.array([5.0, 10.0, 20.0, 8.0])
    latter, r = hp_update(lam, PartialDay(np.array([5, 10]), 2, 1))
    assert r == 1.0
    np.testing.assert_array_equal(latter, lam[2:])


def test_hp_doubling_and_scalar():
    lam = np.array([5.0, 10.0, 20.0, 8.0])
    latter, r = hp_update(lam, PartialDay(np.array([10, 20]), 2, 1))
    np.testing.assert_array_equal(latter, 2 * lam[2:])
    latter, r = hp_update(np.array([100.0, 100.0, 10.0]), PartialDay(np.array([120, 180]), 2, 1))
    assert latter[0] == pytest.approx(15.0, abs=1e-12)


# --- penalty selection ----------------------------------------------------------------

def test_select_omega_single_value_grid(small_counts):
    sel = select_omega(small_counts, 12, PenalizedUpdateConfig(omega_grid=(0.0,)))
    assert sel.omega == 0.0


def test_select_omega_returns_grid_value(small_counts):
    grid = (0.0, 100.0, 1e4, 1e6)
    sel = select_omega(small_counts, 12, PenalizedUpdateConfig(omega_grid=grid), K=2, holdout=4)
    assert sel.omega in grid and sel.days_used == 4
    assert len(sel.mean_rmse) == 4


def test_select_omega_ties_go_to_larger():
    # a flat score profile means every penalty ties
    Y = np.full((30, 6), 25)
    days = [(i % 5) + 1 for i in range(30)]
    sel = select_omega(CountMatrix(Y, days), 3, PenalizedUpdateConfig(omega_grid=(0.0, 10.0, 1e3)), K=1, holdout=3)
    assert sel.omega == 1e3
