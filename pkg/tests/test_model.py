import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hssm_enkf.errors import ConfigurationError, DivergenceError, ParameterDomainError
from hssm_enkf.model import (
    CovFunction,
    build_cloud,
    build_lorenz96,
    build_named_model,
    build_sim_study,
    build_obs_variance_toy,
    cloud_evolution_matrix,
    lorenz96_step,
    lorenz_climatology,
    matern15,
    simulate,
)
from hssm_enkf.rng import stream
from oracles import lorenz_euler_reference


def test_matern15_values():
    assert matern15(0.0, 2.0) == 1.0
    assert matern15(1e3, 1.0) < 1e-300 or matern15(1e3, 1.0) == pytest.approx(0.0, abs=1e-300)
    assert matern15(1.0, 1.0) == pytest.approx((1 + np.sqrt(3)) * np.exp(-np.sqrt(3)))
    assert matern15(1.0, 1.0) == pytest.approx(0.48335, abs=1e-5)
    assert matern15(2.0, 2.0) == matern15(1.0, 1.0)
    with pytest.raises(ParameterDomainError):
        matern15(1.0, 0.0)


def test_cov_function_families():
    C = CovFunction("powered_exponential", scale=10.0, power=1.8)(5)
    assert C[0, 1] == pytest.approx(np.exp(-(0.1**1.8)))
    M = CovFunction("matern_smooth15", scale=2.0, amplitude=3.0)(4)
    assert M[0, 0] == 3.0
    with pytest.raises(ConfigurationError):
        CovFunction("from_matrix", matrix=np.eye(2))(3)


# ---------------------------------------------------------------- Lorenz-96


def test_lorenz_equilibrium_fixed_point():
    x = 8.0 * np.ones(40)
    np.testing.assert_allclose(lorenz96_step(x, 8.0, 0.2, 40), x, atol=1e-12)


def test_lorenz_one_substep_from_zero():
    np.testing.assert_allclose(lorenz96_step(np.zeros(40), 8.0, 0.2, 1), 0.2 * 8.0 * np.ones(40))


@given(st.integers(0, 39), st.integers(0, 2**31))
def test_lorenz_rotation_equivariance(k, seed):
    x = 8 + np.random.default_rng(seed).standard_normal(40)
    a = lorenz96_step(np.roll(x, k), 8.0, 0.2, 10)
    b = np.roll(lorenz96_step(x, 8.0, 0.2, 10), k)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_lorenz_matches_loop_reference():
    x = 8 + np.random.default_rng(2).standard_normal(40)
    np.testing.assert_allclose(lorenz96_step(x, 8.0, 0.2, 40), lorenz_euler_reference(x, 8.0, 0.2, 40), atol=1e-10)


def test_lorenz_vectorized_columns():
    X = 8 + np.random.default_rng(4).standard_normal((40, 3))
    out = lorenz96_step(X, 8.0, 0.2, 40)
    for j in range(3):
        np.testing.assert_allclose(out[:, j], lorenz96_step(X[:, j], 8.0, 0.2, 40), atol=1e-12)


def _halving_norms(x):
    x64, x128, x256 = (lorenz96_step(x, 8.0, 0.2, s) for s in (64, 128, 256))
    return np.linalg.norm(x64 - x128), np.linalg.norm(x128 - x256)


def test_lorenz_euler_halving_converges():
    a, b = _halving_norms(8 + np.random.default_rng(0).standard_normal(40))
    assert a <= 2 * b


def test_lorenz_euler_first_order_rate():
    for seed in range(5):
        a, b = _halving_norms(8 + np.random.default_rng(seed).standard_normal(40))
        assert 1.9 < a / b < 2.1


def test_lorenz_divergence_reports_time():
    with pytest.raises(DivergenceError) as ei:
        lorenz96_step(1e200 * np.arange(40.0), 8.0, 0.2, 4)
    assert ei.value.time is not None


def test_climatology_properties():
    S = lorenz_climatology(sample_steps=50_000, seed=0)
    assert np.all(np.diag(S) > 0)
    assert np.linalg.eigvalsh(S)[0] > -1e-8 * np.linalg.eigvalsh(S)[-1]
    shifted = np.roll(np.roll(S, 1, axis=0), 1, axis=1)
    big = np.abs(S) > 0.2 * np.max(np.abs(S))
    assert np.max(np.abs(S - shifted)[big] / np.abs(S)[big]) < 0.25
    S2 = lorenz_climatology(sample_steps=50_000, seed=1)
    assert abs(np.trace(S2) / np.trace(S) - 1) < 0.10
    with pytest.raises(ParameterDomainError):
        lorenz_climatology(sample_steps=10)


# ---------------------------------------------------------------- cloud


def test_cloud_evolution_matrix():
    np.testing.assert_array_equal(cloud_evolution_matrix(1, 0, 0, 4), np.eye(4))
    a, b, c = 0.5, 0.2, 0.1
    np.testing.assert_array_equal(cloud_evolution_matrix(a, b, c, 3), [[a, b, 0], [c, a, b], [0, c, a]])
    np.testing.assert_array_equal(cloud_evolution_matrix(a, b, c, 3) @ np.array([1.0, 0, 0]), [a, c, 0])
    with pytest.raises(ParameterDomainError):
        cloud_evolution_matrix(1, 0, 0, 1)


@given(st.integers(0, 2**31))
def test_cloud_evolution_linear(seed):
    r = np.random.default_rng(seed)
    # dyadic entries keep every product and sum exact in floating point
    M = cloud_evolution_matrix(*(r.integers(-8, 8, 3) / 8.0), 8)
    u, v = r.integers(-5, 5, 8).astype(float), r.integers(-5, 5, 8).astype(float)
    assert np.array_equal(M @ (u + v), M @ u + M @ v)


# ---------------------------------------------------------------- builders


def test_build_named_model_constants():
    lz = build_named_model("lorenz96")
    assert lz.n == 40 and lz.T == 10
    assert lz.constants["F"] == 8.0 and lz.constants["delta"] == 0.2
    np.testing.assert_array_equal(lz.H(None, 2), np.eye(40))
    np.testing.assert_array_equal(lz.R(None, 2), np.eye(40))
    np.testing.assert_allclose(lz.Q(None, 2), 0.2 * lz.Sigma0)
    cl = build_named_model("cloud", obs_index=[np.arange(54)] * 80)
    assert cl.n == 60 and cl.T == 80 and cl.obs_dim(1, np.zeros(6)) == 54
    assert cl.obs.family == "poisson_log"
    ss = build_named_model("sim_study")
    assert ss.n == 100 and ss.obs_dim(1, np.ones(75)) == 75
    assert ss.mu0[0] == 0.2
    assert ss.Sigma0[0, 1] == pytest.approx(np.exp(-(0.1**1.8)))
    assert ss.constants["sigma"] == 0.2
    with pytest.raises(ConfigurationError):
        build_named_model("nope")


@pytest.mark.parametrize(
    "model",
    [
        build_obs_variance_toy(),
        build_sim_study("heavy_tailed"),
        build_sim_study("rainfall_unknown"),
        build_cloud(),
        build_lorenz96(),
    ],
    ids=lambda m: m.name + ("" if m.name != "sim_study" else "_" + m.constants["scenario"]),
)
def test_layer_covariances_valid_over_prior(model):
    r = stream(0, "prior-check", model.name)
    draws = model.param_init.sample(r, 100)
    for th in draws:
        np.linalg.cholesky(model.R(th, 2))
        Q = model.Q(th, 2)
        w = np.linalg.eigvalsh(Q)
        assert w[0] >= -1e-8 * max(abs(w[-1]), 1e-300)


def test_evolve_is_deterministic():
    m = build_cloud(n=10, T=2)
    X = np.random.default_rng(0).standard_normal((10, 4))
    th = np.array(m.param_init.sample(np.random.default_rng(1), 1)[0])
    assert np.array_equal(m.evolve(X, th, 1), m.evolve(X, th, 1))


def test_simulate_shapes_and_counts():
    m = build_cloud(n=12, T=5)
    d = simulate(m, stream(3, "sim"))
    assert d.x.shape == (5, 12) and len(d.z) == 5
    z = np.array(d.z)
    assert np.all(z >= 0) and np.all(z == np.round(z))


def test_simulate_lorenz_static_theta():
    m = build_lorenz96(T=4)
    d = simulate(m, stream(1, "l"), theta0=[0.7])
    assert np.all(d.theta == 0.7)
