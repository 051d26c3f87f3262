from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize, stats
from scipy.special import gammaln

from hssm_enkf.errors import ConfigurationError, SingularMatrixError
from hssm_enkf.likelihood import (
    enkf_loglik,
    fit_growth,
    integrated_loglik,
    laplace_batch,
    laplace_integrate,
    loglik_draws,
    minimal_ensemble_size,
    particle_loglik,
    y_gaussian_term,
)
from hssm_enkf.model import build_iid_single_time, build_linear_gaussian
from hssm_enkf.obs_models import PoissonLog, poisson_y_mode_and_curvature

import oracles


def _gauss_log_f(z, s2):
    z = np.asarray(z, float)

    def f(y):
        r = z - y
        return float(np.sum(-0.5 * (np.log(2 * np.pi * s2) + r * r / s2))), r / s2, np.full(z.size, -1.0 / s2)

    return f


def _poisson_log_f(z):
    z = np.asarray(z, float)

    def f(y):
        e = np.exp(y)
        return float(np.sum(z * y - e - gammaln(z + 1))), z - e, -e

    return f


def _poisson_model(m):
    base = build_linear_gaussian(np.eye(m), np.eye(m), 0.1 * np.eye(m), 0.2 * np.eye(m), np.zeros(m), np.eye(m))
    return replace(base, obs=PoissonLog())


# --------------------------------------------------------------------------
# particle and EnKF estimators


def test_particle_single_member_is_gaussian_density():
    x = np.array([0.5, -1.0])
    y = np.array([1.0, 0.0])
    R = np.array([[1.0, 0.3], [0.3, 2.0]])
    v = particle_loglik(x[:, None], y, np.eye(2), R).value
    assert v == pytest.approx(stats.multivariate_normal(x, R).logpdf(y), abs=1e-12)


def test_particle_identical_members_any_size():
    x = np.array([0.2, 0.4])
    y = np.array([1.0, 1.0])
    vals = [particle_loglik(np.repeat(x[:, None], N, 1), y, np.eye(2), np.eye(2), 0.5 * np.eye(2)).value for N in (1, 7, 100)]
    assert max(vals) - min(vals) < 1e-12


@given(st.integers(0, 10_000))
def test_particle_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    X = 3 * r.standard_normal((3, 25))
    y = r.standard_normal(3)
    a = particle_loglik(X, y, np.eye(3), np.eye(3)).value
    b = particle_loglik(X[:, r.permutation(25)], y, np.eye(3), np.eye(3)).value
    assert a == b


def test_particle_singular_raises():
    with pytest.raises(SingularMatrixError):
        particle_loglik(np.zeros((2, 3)), np.zeros(2), np.eye(2), np.zeros((2, 2)))


def test_particle_unbiased_iid_single_time():
    kappa, theta, N = 4.0, 1.0, 50
    r = np.random.default_rng(21)
    y = r.normal(0, np.sqrt(kappa + theta), 1)
    true = stats.norm(0, np.sqrt(kappa + theta)).logpdf(y[0])
    draws = loglik_draws("particle", y, N, 200, kappa, theta, r, method="ensemble")
    ratio = np.exp(draws - true)
    assert 0.8 <= ratio.mean() <= 1.2


def test_particle_skew_grows_with_dimension():
    kappa, theta, N = 4.0, 1.0, 50
    r = np.random.default_rng(30)
    skews = []
    for n in (1, 6):
        y = r.normal(0, np.sqrt(kappa + theta), n)
        true = stats.multivariate_normal(np.zeros(n), (kappa + theta) * np.eye(n)).logpdf(y)
        skews.append(stats.skew(np.exp(loglik_draws("particle", y, N, 2000, kappa, theta, r) - true)))
    assert skews[1] > skews[0]


def test_enkf_large_ensemble_iid_single_time():
    n, N, kappa, theta = 3, 5000, 4.0, 1.0
    r = np.random.default_rng(22)
    y = r.normal(0, np.sqrt(kappa + theta), n)
    X = np.sqrt(kappa) * r.standard_normal((n, N))
    v = enkf_loglik(X, y, np.eye(n), theta * np.eye(n)).value
    true = stats.multivariate_normal(np.zeros(n), (kappa + theta) * np.eye(n)).logpdf(y)
    assert abs(v - true) <= 0.05 * n


def test_enkf_maximal_at_ensemble_mean():
    r = np.random.default_rng(23)
    X = r.standard_normal((2, 40))
    H = np.array([[1.0, 0.5], [0.0, 1.0]])
    R = np.eye(2)
    center = H @ X.mean(axis=1)
    top = enkf_loglik(X, center, H, R).value
    for _ in range(20):
        assert enkf_loglik(X, center + r.standard_normal(2), H, R).value < top


def test_enkf_diagonal_taper_decomposes():
    n = 5
    r = np.random.default_rng(24)
    X = 2 * r.standard_normal((n, 30))
    y = r.standard_normal(n)
    joint = enkf_loglik(X, y, np.eye(n), np.eye(n), taper=np.eye(n)).value
    parts = sum(enkf_loglik(X[i : i + 1], y[i : i + 1], [[1.0]], [[1.0]]).value for i in range(n))
    assert joint == pytest.approx(parts, abs=1e-10)


def test_estimators_monotone_away_from_center():
    # symmetric ensemble with spread below the noise scale keeps the mixture unimodal
    offsets = np.array([-0.9, -0.5, -0.2, 0.0, 0.2, 0.5, 0.9])
    X = (1.5 + offsets)[None, :]
    for f in (particle_loglik, enkf_loglik):
        up = [f(X, np.array([1.5 + d]), [[1.0]], [[1.0]]).value for d in np.linspace(0, 6, 25)]
        down = [f(X, np.array([1.5 - d]), [[1.0]], [[1.0]]).value for d in np.linspace(0, 6, 25)]
        assert np.all(np.diff(up) < 0) and np.all(np.diff(down) < 0)


def test_enkf_variance_smaller_than_particle_n6():
    r = np.random.default_rng(25)
    y = r.normal(0, np.sqrt(5.0), 6)
    vp = np.var(loglik_draws("particle", y, 50, 200, rng=r, method="ensemble"))
    ve = np.var(loglik_draws("enkf", y, 50, 200, rng=r, method="ensemble"))
    assert ve < vp


@pytest.mark.parametrize("est", ["particle", "enkf"])
def test_sufficient_statistic_draws_match_ensemble_draws(est):
    # two sampling routes for the same estimator agree in distribution
    y = np.array([1.0, -2.0, 0.5])
    a = loglik_draws(est, y, 20, 2000, rng=np.random.default_rng(1), method="sufficient")
    b = loglik_draws(est, y, 20, 2000, rng=np.random.default_rng(2), method="ensemble")
    assert stats.ks_2samp(a, b).pvalue > 0.001


def test_unknown_estimator():
    with pytest.raises(ConfigurationError):
        loglik_draws("nope", np.zeros(1), 5, 5, rng=np.random.default_rng(0))


def test_minimal_size_and_growth_fit():
    rows = []
    for n in (1, 2, 4, 8):
        for est in ("enkf", "particle"):
            N, cens, v = minimal_ensemble_size(est, n, replications=60, y_realizations=10, N_max=2**14, seed=3)
            assert cens or v < 2.0
            rows.append({"n": n, "estimator": est, "minimal_N": N, "censored_flag": cens})
    pe = {r["n"]: r["minimal_N"] for r in rows if r["estimator"] == "particle"}
    en = {r["n"]: r["minimal_N"] for r in rows if r["estimator"] == "enkf"}
    assert pe[8] > en[8]
    slope, _, r2 = fit_growth(rows, "particle", log_scale=True)
    assert slope > 0 and 0 <= r2 <= 1


# --------------------------------------------------------------------------
# Laplace integration


def test_laplace_exact_for_gaussian_diagonal():
    z = np.array([0.3, -1.2, 2.0])
    mu = np.array([0.0, 0.5, 1.0])
    var = np.array([1.0, 2.0, 0.5])
    s2 = 0.7
    res = laplace_integrate(_gauss_log_f(z, s2), mu, np.diag(var))
    exact = stats.multivariate_normal(mu, np.diag(var) + s2 * np.eye(3)).logpdf(z)
    assert res.value == pytest.approx(exact, abs=1e-8)


def test_laplace_exact_for_gaussian_full_cov():
    z = np.array([0.3, -1.2])
    mu = np.array([0.1, 0.4])
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    res = laplace_integrate(_gauss_log_f(z, 0.4), mu, S)
    exact = stats.multivariate_normal(mu, S + 0.4 * np.eye(2)).logpdf(z)
    assert res.value == pytest.approx(exact, abs=1e-8)


@pytest.mark.parametrize("z,mu,var", [(0, 0.0, 0.5), (3, 1.0, 0.3), (10, 2.0, 0.2), (1, -0.5, 1.0), (25, 3.0, 0.1)])
def test_laplace_poisson_matches_quadrature_1d(z, mu, var):
    res = laplace_integrate(_poisson_log_f([z]), [mu], [[var]])
    assert abs(res.value - oracles.poisson_gauss_logint_1d(z, mu, var)) <= 0.05


def test_laplace_poisson_matches_quadrature_2d():
    z = np.array([2.0, 5.0])
    mu = np.array([0.5, 1.5])
    S = np.array([[0.3, 0.1], [0.1, 0.25]])
    res = laplace_integrate(_poisson_log_f(z), mu, S)
    g = stats.multivariate_normal(mu, S)

    def f(y2, y1):
        y = np.array([y1, y2])
        return np.exp(np.sum(z * y - np.exp(y) - gammaln(z + 1)) + g.logpdf(y))

    sd = np.sqrt(np.diag(S))
    val, _ = integrate.dblquad(f, mu[0] - 8 * sd[0], mu[0] + 8 * sd[0], mu[1] - 8 * sd[1], mu[1] + 8 * sd[1])
    assert abs(res.value - np.log(val)) <= 0.1


def test_integrated_laplace_matches_quadrature_via_model():
    model = _poisson_model(1)
    X = 1.0 + 0.5 * np.random.default_rng(26).standard_normal((1, 40))
    z = np.array([4.0])
    est = integrated_loglik(X, z, model, None, "laplace")
    mean, cov, _ = y_gaussian_term(X, model, None)
    assert abs(est.value - oracles.poisson_gauss_logint_1d(4, mean[0], cov[0, 0])) <= 0.05
    assert est.estimator == "integrated_laplace"


def test_integrated_monte_carlo_close_to_laplace():
    model = _poisson_model(2)
    X = 1.0 + 0.5 * np.random.default_rng(27).standard_normal((2, 40))
    z = np.array([4.0, 1.0])
    lap = integrated_loglik(X, z, model, None, "laplace").value
    mc = integrated_loglik(X, z, model, None, "monte_carlo", rng=np.random.default_rng(0), n_mc=4000).value
    assert abs(lap - mc) < 0.1


def test_integrated_identity_equals_enkf():
    model = build_iid_single_time(n=3)
    X = 2 * np.random.default_rng(28).standard_normal((3, 20))
    z = np.array([1.0, 0.0, -1.0])
    a = integrated_loglik(X, z, model, np.array([1.0]), "degenerate").value
    b = enkf_loglik(X, z, np.eye(3), np.eye(3), np.zeros((3, 3))).value
    assert a == b


def test_integrated_unknown_strategy():
    model = _poisson_model(1)
    with pytest.raises(ConfigurationError):
        integrated_loglik(np.ones((1, 5)) + np.arange(5), [1.0], model, None, "bogus")


def test_poisson_mode_below_prior_for_zero_count():
    mu, var = 1.0, 0.05
    mode, _ = poisson_y_mode_and_curvature(np.array([0.0]), mu, var)
    ref = optimize.brentq(lambda y: -np.exp(y) - (y - mu) / var, mu - 10, mu + 10)
    assert mode[0] < mu
    assert mode[0] == pytest.approx(ref, abs=1e-8)
    res = laplace_integrate(_poisson_log_f([0.0]), [mu], [[var]])
    assert res.mode[0] == pytest.approx(ref, abs=1e-8)


@pytest.mark.parametrize("m", [1, 3])
def test_laplace_spread_term_scales_with_log2(m):
    def flat(y):
        return 0.0, np.zeros(m), np.zeros(m)

    S = np.diag(np.linspace(0.5, 2.0, m))
    a = laplace_integrate(flat, np.zeros(m), S)
    b = laplace_integrate(flat, np.zeros(m), 2 * S)
    assert b.log_det_term - a.log_det_term == pytest.approx(0.5 * m * np.log(2), abs=1e-12)
    assert a.value == pytest.approx(0.0, abs=1e-12)


def test_laplace_value_is_mode_integrand_plus_log_det():
    mu = np.array([0.5, 1.0])
    S = np.diag([0.4, 0.3])
    f = _poisson_log_f([3.0, 0.0])
    res = laplace_integrate(f, mu, S)
    assert res.value == res.log_integrand + res.log_det_term
    # the mode maximizes the integrand
    g = stats.multivariate_normal(mu, S)
    for y in (mu, res.mode + 0.05, res.mode - 0.05):
        assert f(y)[0] + g.logpdf(y) <= res.log_integrand + 1e-12


def test_laplace_batch_matches_single():
    r = np.random.default_rng(29)
    Mu = 1.0 + 0.3 * r.standard_normal((3, 6))
    S = np.array([[0.3, 0.05, 0.0], [0.05, 0.2, 0.02], [0.0, 0.02, 0.4]])
    z = np.array([2.0, 0.0, 7.0])
    batch = laplace_batch(PoissonLog(), z, Mu, S)
    for j in range(6):
        single = laplace_integrate(_poisson_log_f(z), Mu[:, j], S)
        assert batch.values[j] == pytest.approx(single.value, abs=1e-8)
        np.testing.assert_allclose(batch.modes[:, j], single.mode, atol=1e-7)


def test_laplace_batch_ill_conditioned_counts():
    # captured from a cloud-filter step where the gradient stalls at ~4e-7
    d = np.load(Path(__file__).parent / "data" / "laplace_rounding_floor.npz")
    z, Mu, S = d["z"], d["Mu"], d["S"]
    batch = laplace_batch(PoissonLog(), z, Mu, S)
    P0 = np.linalg.inv(S)
    for j in (0, 7, 19, 29):
        mu = Mu[:, j]

        def neg(y):
            r = y - mu
            return -(z @ y - np.exp(y).sum()) + 0.5 * r @ P0 @ r

        def neg_grad(y):
            return -(z - np.exp(y)) + P0 @ (y - mu)

        res = optimize.minimize(neg, mu, jac=neg_grad, hess=lambda y: P0 + np.diag(np.exp(y)),
                                method="trust-exact", options={"gtol": 1e-9})
        np.testing.assert_allclose(batch.modes[:, j], res.x, atol=1e-6)
