from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from hssm_enkf.enkf import enkf_forecast, enkf_update, initial_ensemble
from hssm_enkf.ensemble import Kind, StateEnsemble
from hssm_enkf.errors import ContractError, DegeneracyError
from hssm_enkf.extended_filters import (
    ParticleSystem,
    SharedSystem,
    earbpf_step,
    genkf_step,
    init_particle_system,
    liu_west_refresh,
    normalize_log_weights,
    penkf_step,
    penkf_step_fi,
    resample,
    resample_indices,
)
from hssm_enkf.model import GaussianPrior, RandomWalk, build_iid_single_time, build_linear_gaussian, build_obs_variance_toy, simulate
from hssm_enkf.rng import stream

import oracles


def _with_dummy_param(model):
    """Attach an unused static parameter so particle machinery can run."""
    return replace(
        model,
        param_names=("dummy",),
        param_init=GaussianPrior(np.zeros(1), np.ones(1)),
        param_transition=RandomWalk(np.zeros(1)),
    )


def _toy_data(n, seed):
    model = build_obs_variance_toy(n=n)
    data = simulate(model, np.random.default_rng(seed), theta0=[1.0])
    return model, data.z[0]


# --------------------------------------------------------------------------
# GEnKF


def test_genkf_degenerate_layers_equal_enkf_update():
    n, M = 4, 30
    r = np.random.default_rng(0)
    A = 0.5 * r.standard_normal((n, n))
    model = replace(
        build_linear_gaussian(A, np.eye(n)[:3], 0.3 * np.eye(n), 0.5 * np.eye(3), np.zeros(n), np.eye(n)),
        forecast_independent=True,
    )
    X = r.standard_normal((n, M))
    z = r.standard_normal(3)
    g = genkf_step(model, X, None, z, iters=1, rng=np.random.default_rng(7), t=1)
    f = enkf_forecast(model, StateEnsemble(X, 0, Kind.FILTERING))
    a = enkf_update(f, z, model, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(g.x, a.members)


def test_genkf_requires_forecast_independence():
    model = build_linear_gaussian(np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(ContractError):
        genkf_step(model, np.zeros((2, 5)), None, np.zeros(2), rng=np.random.default_rng(0))


def test_genkf_conjugate_toy_matches_exact_gibbs():
    n = 10
    model, z = _toy_data(n, 1)
    rng = np.random.default_rng(2)
    X0 = initial_ensemble(model, 500, rng)
    # identity evolution: the forecast ensemble is the prior ensemble
    st = genkf_step(model, X0, None, z, iters=20, rng=rng, t=1)
    ref = oracles.exact_gibbs_obs_variance(z, model.mu0, model.Sigma0, 3.0, 2.0, 20_000, 1000, 3)
    assert abs(st.theta.mean() - ref.mean()) <= 0.1 * ref.mean()


# --------------------------------------------------------------------------
# PEnKF


def _penkf_toy(n, M, N, seed, z):
    model = build_obs_variance_toy(n=n)
    rng = stream(seed, "penkf-toy")
    system = init_particle_system(model, M, N, rng)
    out, d = penkf_step(model, system, z, rng=rng, t=1, ess_threshold=0.0)
    return out, d


def test_penkf_toy_matches_grid():
    n = 5
    model, z = _toy_data(n, 4)
    out, _ = _penkf_toy(n, 4000, 100, 5, z)
    w = out.weights
    th = out.theta[:, 0]
    mean = w @ th
    var = w @ (th - mean) ** 2
    gm, gv = oracles.grid_posterior_obs_variance(z, model.mu0, model.Sigma0, 3.0, 2.0)
    assert abs(mean - gm) <= 0.1 * gm
    assert abs(var - gv) <= 0.1 * gv


def test_penkf_fi_toy_matches_grid():
    n = 5
    model, z = _toy_data(n, 4)
    rng = stream(6, "penkf-fi")
    Mx, Mt = 500, 5000
    sys0 = SharedSystem(initial_ensemble(model, Mx, rng), model.param_init.sample(rng, Mt), np.full(Mt, -np.log(Mt)))
    out, _ = penkf_step_fi(model, sys0, z, rng=rng, t=1, ess_threshold=0.0)
    w = out.weights
    th = out.theta[:, 0]
    mean = w @ th
    var = w @ (th - mean) ** 2
    gm, gv = oracles.grid_posterior_obs_variance(z, model.mu0, model.Sigma0, 3.0, 2.0)
    assert abs(mean - gm) <= 0.1 * gm
    assert abs(var - gv) <= 0.1 * gv


def test_penkf_fi_and_general_path_agree():
    n = 5
    model, z = _toy_data(n, 8)
    gen, fi = [], []
    for s in range(12):
        out, _ = _penkf_toy(n, 300, 300, 100 + s, z)
        gen.append(out.weights @ out.theta[:, 0])
        rng = stream(200 + s, "fi")
        sys0 = SharedSystem(initial_ensemble(model, 300, rng), model.param_init.sample(rng, 300), np.full(300, -np.log(300)))
        o2, _ = penkf_step_fi(model, sys0, z, rng=rng, t=1, ess_threshold=0.0)
        fi.append(o2.weights @ o2.theta[:, 0])
    gen, fi = np.array(gen), np.array(fi)
    se = np.sqrt(gen.var(ddof=1) / gen.size + fi.var(ddof=1) / fi.size)
    assert abs(gen.mean() - fi.mean()) <= 3 * se


def test_penkf_fi_oversampling_evaluates_evolution_once_per_member():
    n = 5
    base, z = _toy_data(n, 9)
    calls = []

    def evolve(X, th, t):
        calls.append(X.shape[1])
        return np.array(X)

    model = replace(base, evolve=evolve)
    rng = np.random.default_rng(10)
    Mx = 40
    sys0 = SharedSystem(initial_ensemble(model, Mx, rng), model.param_init.sample(rng, 10 * Mx), np.full(10 * Mx, -np.log(10 * Mx)))
    out, _ = penkf_step_fi(model, sys0, z, rng=rng, t=1)
    assert sum(calls) == Mx
    assert out.evolve_calls == 1


def test_penkf_fi_single_particle_is_enkf():
    n, Mx = 3, 5000
    model, z = _toy_data(n, 11)
    theta = np.array([[0.7]])

    class Fixed:
        def sample(self, prev, rng, t=None):
            return np.array(theta)

        def logpdf(self, th, prev, t=None):
            return np.zeros(1)

    rng = np.random.default_rng(12)
    X = initial_ensemble(model, Mx, rng)
    out, _ = penkf_step_fi(model, SharedSystem(X, theta, np.zeros(1)), z, proposal=Fixed(), rng=rng, t=1)
    ref = enkf_update(StateEnsemble(X, 1), z, model, theta=theta[0], rng=np.random.default_rng(13))
    se = np.sqrt(np.var(ref.members, axis=1, ddof=1) / Mx)
    assert np.all(np.abs(out.x.mean(axis=1) - ref.members.mean(axis=1)) <= 3 * np.sqrt(2) * se)


def test_penkf_proposal_equal_to_transition_cancels():
    n = 3
    model, z = _toy_data(n, 14)

    class SameAsTransition:
        def sample(self, prev, rng, t=None):
            return model.param_transition.sample(prev, rng, t)

        def logpdf(self, th, prev, t=None):
            return model.param_transition.logpdf(th, prev, t)

    sys0 = init_particle_system(model, 20, 10, np.random.default_rng(15))
    a, _ = penkf_step(model, sys0, z, rng=np.random.default_rng(16), t=1, ess_threshold=0.0)
    b, _ = penkf_step(model, sys0, z, proposal=SameAsTransition(), rng=np.random.default_rng(16), t=1, ess_threshold=0.0)
    np.testing.assert_allclose(a.log_w, b.log_w, atol=1e-12)


def test_penkf_normalized_weights_bounded():
    n = 5
    model, z = _toy_data(n, 17)
    out, d = _penkf_toy(n, 200, 20, 18, 100.0 * z)
    assert np.all(out.weights <= 1.0)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_total_degeneracy_reports_max_log_weight():
    with pytest.raises(DegeneracyError) as info:
        normalize_log_weights(np.full(4, -np.inf), time=3)
    assert info.value.max_log_weight == -np.inf


# --------------------------------------------------------------------------
# resampling


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_resampling_expected_copies(scheme):
    w = np.array([0.05, 0.1, 0.15, 0.3, 0.4])
    rng = np.random.default_rng(19)
    counts = np.zeros(w.size)
    trials = 10_000
    for _ in range(trials):
        counts += np.bincount(resample_indices(w, scheme, rng), minlength=w.size)
    expected = trials * w.size * w
    assert stats.chisquare(counts, expected).pvalue > 0.001


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_resampling_half_half(scheme):
    w = np.array([0.5, 0.5, 0.0, 0.0])
    rng = np.random.default_rng(20)
    c = np.array([np.bincount(resample_indices(w, scheme, rng), minlength=4) for _ in range(10_000)])
    se = c.std(axis=0, ddof=1) / np.sqrt(c.shape[0])
    assert np.all(np.abs(c.mean(axis=0) - [2, 2, 0, 0]) <= 3 * se + 1e-12)


def test_systematic_uniform_weights_each_once():
    idx = resample_indices(np.full(7, 1 / 7), "systematic", np.random.default_rng(21))
    assert sorted(idx) == list(range(7))


def test_resample_single_dominant_particle():
    M = 6
    sys0 = ParticleSystem(
        theta=np.arange(M, dtype=float)[:, None],
        log_w=np.log(np.array([0, 0, 1.0, 0, 0, 0]) + 1e-300),
        ens=np.zeros((M, 2, 3)),
    )
    for scheme in ("multinomial", "systematic"):
        out = resample(sys0, scheme, np.random.default_rng(22))
        assert np.all(out.theta[:, 0] == 2.0)
        np.testing.assert_allclose(out.weights, 1 / M)


# --------------------------------------------------------------------------
# Liu-West


def _lw_cloud(seed=23):
    r = np.random.default_rng(seed)
    th = r.multivariate_normal([1.0, -2.0], [[1.0, 0.4], [0.4, 0.5]], 50)
    w = r.random(50)
    return th, w / w.sum()


def test_liu_west_no_jitter():
    th, w = _lw_cloud()
    np.testing.assert_array_equal(liu_west_refresh(th, w, 0.0, np.random.default_rng(0)), th)


def test_liu_west_preserves_moments():
    th, w = _lw_cloud()
    r = np.random.default_rng(24)
    mean = w @ th
    A = th - mean
    V = (A * w[:, None]).T @ A
    means, covs = [], []
    for _ in range(10_000):
        new = liu_west_refresh(th, w, 0.1, r)
        m = w @ new
        B = new - m
        means.append(m)
        covs.append((B * w[:, None]).T @ B)
    means = np.array(means)
    se = means.std(axis=0, ddof=1) / np.sqrt(len(means))
    assert np.all(np.abs(means.mean(axis=0) - mean) <= 3 * se)
    C = np.mean(covs, axis=0)
    assert np.linalg.norm(C - V) / np.linalg.norm(V) <= 0.05


def test_liu_west_singular_covariance_fallback():
    th = np.column_stack([np.linspace(0, 1, 20), np.full(20, 3.0)])
    new = liu_west_refresh(th, np.ones(20), 0.2, np.random.default_rng(25))
    assert np.all(np.isfinite(new))
    assert np.allclose(new[:, 1], 3.0)


# --------------------------------------------------------------------------
# EARBPF


def test_earbpf_matches_penkf_low_dimension():
    model = _with_dummy_param(build_linear_gaussian([[0.8]], [[1.0]], [[0.5]], [[0.4]], [0.0], [[1.0]], T=3))
    z_seq = [np.array([0.7]), np.array([1.4]), np.array([0.2])]
    means = {"pen": [], "ear": []}
    for s in range(8):
        for key, step in (("pen", penkf_step), ("ear", earbpf_step)):
            rng = stream(s, "lowdim", key)
            sys_ = init_particle_system(model, 2, 5000, rng)
            for t, z in enumerate(z_seq, start=1):
                sys_, _ = step(model, sys_, z, rng=rng, t=t)
            means[key].append(float(np.mean(sys_.ens)))
    _, _, fm, _, _ = oracles.kalman_filter(np.array([[0.8]]), np.eye(1), 0.5 * np.eye(1), 0.4 * np.eye(1), np.zeros(1), np.eye(1), z_seq)
    a, b = np.array(means["pen"]), np.array(means["ear"])
    se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) <= 3 * se
    assert abs(b.mean() - fm[-1][0]) <= 3 * b.std(ddof=1) / np.sqrt(b.size) + 1e-3


def test_earbpf_member_weights_degenerate_in_high_dimension():
    # independent single-step trials: forecast N(0, 4 I), data N(0, 5 I), n = 50
    n = 50
    model = replace(
        build_iid_single_time(n=n), param_init=GaussianPrior(np.ones(1), np.zeros(1)), param_transition=RandomWalk(np.zeros(1))
    )
    rng = np.random.default_rng(27)
    collapsed = []
    for _ in range(20):
        z = rng.normal(0.0, np.sqrt(5.0), n)
        sys_ = init_particle_system(model, 2, 30, rng, theta0=[[1.0]])
        _, d = earbpf_step(model, sys_, z, rng=rng, t=1)
        collapsed.extend(d["member_ess"] < 2)
    assert np.mean(collapsed) >= 0.9
