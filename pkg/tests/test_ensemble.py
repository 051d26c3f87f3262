import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hssm_enkf.ensemble import (
    GaussianSummary,
    Kind,
    StateEnsemble,
    TaperSpec,
    kalman_gain,
    regularized_cov,
    sample_cov,
    sample_mean,
    taper_matrix,
    wendland,
)
from hssm_enkf.errors import DegenerateEnsembleError, DimensionError, SingularMatrixError

finite = st.floats(-50, 50, allow_nan=False)


def ensembles(max_n=5, min_N=2, max_N=8):
    return st.tuples(st.integers(1, max_n), st.integers(min_N, max_N)).flatmap(
        lambda s: arrays(float, s, elements=finite)
    )


# ---------------------------------------------------------------- containers


def test_state_ensemble_rejects_nonfinite_and_empty():
    with pytest.raises(DimensionError):
        StateEnsemble(np.array([[1.0, np.nan]]))
    with pytest.raises(DimensionError):
        StateEnsemble(np.zeros((2, 0)))
    with pytest.raises(DimensionError):
        StateEnsemble(np.ones((2, 2)), time_index=-1)


def test_state_ensemble_is_read_only():
    e = StateEnsemble(np.ones((2, 3)), 1, "filtering")
    assert e.kind is Kind.FILTERING and e.n == 2 and e.N == 3
    with pytest.raises(ValueError):
        e.members[0, 0] = 5.0


def test_gaussian_summary_symmetry_and_psd_checks():
    GaussianSummary(np.zeros(2), np.eye(2))
    with pytest.raises(Exception):
        GaussianSummary(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(Exception):
        GaussianSummary(np.zeros(2), np.diag([1.0, -1.0]))


# ---------------------------------------------------------------- moments


def test_sample_mean_cases(rng):
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(sample_mean(v[:, None]), v)
    assert np.array_equal(sample_mean(np.column_stack([v, -v])), np.zeros(3))
    X = rng.standard_normal((4, 5))
    brute = np.array([sum(X[i, j] for j in range(5)) / 5 for i in range(4)])
    np.testing.assert_allclose(sample_mean(X), brute, atol=1e-12)


def test_sample_cov_cases(rng):
    a = np.array([1.0, 2.0])
    assert np.array_equal(sample_cov(np.column_stack([a, a])), np.zeros((2, 2)))
    assert sample_cov(np.array([[0.0, 2.0]]))[0, 0] == pytest.approx(2.0)
    with pytest.raises(DegenerateEnsembleError):
        sample_cov(np.ones((3, 1)))
    sd = np.array([1.0, 2.0, 0.5])
    X = sd[:, None] * rng.standard_normal((3, 50))
    np.testing.assert_allclose(np.diag(sample_cov(X)), sd**2, rtol=0.4)


@given(ensembles())
def test_sample_cov_is_psd(X):
    C = sample_cov(X)
    w = np.linalg.eigvalsh(C)
    assert w[0] >= -1e-8 * max(abs(w[-1]), 1e-300)


# ---------------------------------------------------------------- taper


def test_wendland_values():
    assert wendland(0.0, 4.0) == 1.0
    assert wendland(4.0, 4.0) == 0.0 and wendland(9.0, 4.0) == 0.0
    assert wendland(2.0, 4.0) == pytest.approx(0.1875)


@given(st.integers(2, 40), st.floats(0.5, 40.0), st.sampled_from(["linear", "periodic"]))
def test_taper_matrix_properties(n, c, distance):
    T = taper_matrix(TaperSpec(c, distance=distance), n)
    assert np.array_equal(T, T.T)
    assert np.all(np.diag(T) == 1.0)
    assert T.min() >= 0.0 and T.max() <= 1.0
    if distance == "linear" and c <= n:
        w = np.linalg.eigvalsh(T)
        assert w[0] >= -1e-8


def test_identity_taper_is_all_ones():
    assert np.array_equal(taper_matrix(TaperSpec.identity(), 4), np.ones((4, 4)))


def test_taper_compact_support():
    T = taper_matrix(TaperSpec(3.0), 10)
    d = np.abs(np.subtract.outer(np.arange(10), np.arange(10)))
    assert np.all(T[d >= 3] == 0)


def test_periodic_distance_wraps():
    T = taper_matrix(TaperSpec(3.0, distance="periodic"), 10)
    assert T[0, 9] == T[0, 1] > 0


# ---------------------------------------------------------------- regularized covariance


def test_regularized_cov_identity_taper_equals_sample_cov(rng):
    X = rng.standard_normal((5, 12))
    fc = regularized_cov(X, TaperSpec.identity())
    assert np.max(np.abs(fc.cov - sample_cov(X))) <= 1e-12
    np.testing.assert_array_equal(fc.mean, sample_mean(X))


def test_regularized_cov_short_range_keeps_diagonal(rng):
    X = rng.standard_normal((5, 12))
    Q = 0.3 * np.eye(5)
    fc = regularized_cov(X, TaperSpec(0.9), Q)
    np.testing.assert_allclose(fc.cov, np.diag(np.diag(sample_cov(X))) + Q, atol=1e-14)


def test_regularized_cov_iid_limit():
    # forecast N(0, 4 I), diagonal taper, Q = 0
    rng = np.random.default_rng(3)
    X = 2.0 * rng.standard_normal((3, 2000))
    fc = regularized_cov(X, TaperSpec(0.5))
    np.testing.assert_allclose(np.diag(fc.cov), 4.0, rtol=0.15)


def test_regularized_cov_needs_two_members():
    with pytest.raises(DegenerateEnsembleError):
        regularized_cov(np.ones((2, 1)), TaperSpec.identity())


# ---------------------------------------------------------------- gain


def test_kalman_gain_cases():
    I = np.eye(2)
    np.testing.assert_allclose(kalman_gain(GaussianSummary(np.zeros(2), I), I, I), 0.5 * I)
    np.testing.assert_allclose(kalman_gain(GaussianSummary(np.zeros(2), I), I, 1e-9 * I), I, atol=1e-8)
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    A = S + I
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    Ainv = np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det
    np.testing.assert_allclose(kalman_gain(GaussianSummary(np.zeros(2), S), I, I), S @ Ainv, atol=1e-10)


def test_kalman_gain_singular_innovation_names_matrix():
    with pytest.raises(SingularMatrixError) as ei:
        kalman_gain(GaussianSummary(np.zeros(2), np.zeros((2, 2))), np.eye(2), np.diag([1.0, 0.0]))
    assert "innovation" in str(ei.value)


def test_kalman_gain_shape_check():
    with pytest.raises(DimensionError):
        kalman_gain(GaussianSummary(np.zeros(2), np.eye(2)), np.eye(3), np.eye(3))


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_gain_residual_identity(n, m, seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((n, n + 2))
    S = A @ A.T / (n + 2)
    H = r.standard_normal((m, n))
    B = r.standard_normal((m, m))
    R = B @ B.T + 0.5 * np.eye(m)
    K = kalman_gain(GaussianSummary(np.zeros(n), S), H, R)
    lhs = K @ (H @ S @ H.T + R)
    rhs = S @ H.T
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(np.linalg.norm(rhs), 1.0)
