"""Ensemble containers, moment estimators, covariance tapering and gain algebra.

Ensembles are stored state-major: ``members`` has shape ``(n, N)`` with one
column per ensemble member.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Union

import numpy as np
from scipy import linalg

from .errors import DegenerateEnsembleError, DimensionError, SingularMatrixError

MAX_COND = 1e12


class Kind(str, Enum):
    FORECAST = "forecast"
    FILTERING = "filtering"
    SMOOTHING = "smoothing"


@dataclass(frozen=True)
class StateEnsemble:
    members: np.ndarray
    time_index: int = 0
    kind: Kind = Kind.FORECAST

    def __post_init__(self):
        m = np.array(self.members, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2 or m.shape[1] < 1 or m.shape[0] < 1:
            raise DimensionError(f"ensemble must be a non-empty n x N matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DimensionError("ensemble contains non-finite entries")
        if self.time_index < 0:
            raise DimensionError("time_index must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "members", m)
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def n(self):
        return self.members.shape[0]

    @property
    def N(self):
        return self.members.shape[1]

    def with_members(self, members, kind=None, time_index=None):
        return StateEnsemble(
            members,
            self.time_index if time_index is None else time_index,
            self.kind if kind is None else kind,
        )


EnsembleLike = Union[StateEnsemble, np.ndarray]


def members_of(ens: EnsembleLike) -> np.ndarray:
    if isinstance(ens, StateEnsemble):
        return ens.members
    m = np.asarray(ens, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    return m


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * scale:
            raise DimensionError("covariance is not symmetric")
        if cov.size and not psd_ok(cov):
            raise DimensionError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class TaperSpec:
    """Compactly supported correlation used to regularize sample covariances.

    ``distance`` is ``"linear"`` (``|i-j|``), ``"periodic"`` (distance on a
    circle of ``n`` points) or a callable ``f(i, j, n)`` on index arrays.
    """

    range: float = np.inf
    family: str = "wendland"
    distance: Union[str, Callable] = "linear"

    def __post_init__(self):
        if self.family not in ("wendland", "identity"):
            raise ValueError(f"unknown taper family {self.family!r}")
        if self.family == "wendland" and not self.range > 0:
            raise ValueError("taper range must be positive")

    @classmethod
    def identity(cls):
        return cls(range=np.inf, family="identity")


def wendland(d, c):
    """C2 Wendland correlation ``(1 - d/c)_+^4 (4 d/c + 1)``."""
    r = np.asarray(d, dtype=float) / c
    return np.where(r < 1.0, (1.0 - np.minimum(r, 1.0)) ** 4 * (4.0 * r + 1.0), 0.0)


def index_distances(n, distance="linear"):
    i = np.arange(n)
    if callable(distance):
        return np.asarray(distance(i[:, None], i[None, :], n), dtype=float)
    d = np.abs(i[:, None] - i[None, :]).astype(float)
    if distance == "periodic":
        d = np.minimum(d, n - d)
    elif distance != "linear":
        raise ValueError(f"unknown distance {distance!r}")
    return d


def taper_matrix(spec: TaperSpec, n: int) -> np.ndarray:
    """Dense ``n x n`` taper correlation matrix for ``spec``."""
    if spec.family == "identity":
        return np.ones((n, n))
    return wendland(index_distances(n, spec.distance), spec.range)


def sample_mean(ens: EnsembleLike) -> np.ndarray:
    X = members_of(ens)
    if X.size == 0:
        raise DimensionError("empty ensemble")
    return X.mean(axis=1)


def sample_cov(ens: EnsembleLike) -> np.ndarray:
    """Unbiased sample covariance (divisor ``N - 1``)."""
    X = members_of(ens)
    N = X.shape[1]
    if N < 2:
        raise DegenerateEnsembleError(f"covariance needs at least 2 members, got {N}")
    A = X - X.mean(axis=1, keepdims=True)
    C = A @ A.T / (N - 1)
    return 0.5 * (C + C.T)


def cross_cov(X, Y):
    """Sample cross-covariance between the columns of ``X`` and ``Y``."""
    X = members_of(X)
    Y = members_of(Y)
    N = X.shape[1]
    if N < 2 or Y.shape[1] != N:
        raise DegenerateEnsembleError("cross-covariance needs matching ensembles of size >= 2")
    A = X - X.mean(axis=1, keepdims=True)
    B = Y - Y.mean(axis=1, keepdims=True)
    return A @ B.T / (N - 1)


def regularized_cov(ens: EnsembleLike, spec: TaperSpec, Q=None, taper=None) -> GaussianSummary:
    """Tapered sample covariance plus innovation covariance ``Q``.

    ``taper`` may pass a precomputed taper matrix to avoid rebuilding it.
    """
    X = members_of(ens)
    C = sample_cov(X)
    if taper is None:
        taper = taper_matrix(spec, X.shape[0])
    C = C * taper
    if Q is not None:
        C = C + Q
    return GaussianSummary(X.mean(axis=1), C)


def _factor(S, name):
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    wmax = w[-1]
    if not np.all(np.isfinite(w)) or wmax <= 0 or w[0] <= wmax / MAX_COND:
        cond = np.inf if (w[0] <= 0 or wmax <= 0) else wmax / w[0]
        raise SingularMatrixError(name, cond)
    return linalg.cho_factor(S, lower=True, check_finite=False)


def solve_gain(cross, S, name="innovation covariance H Sigma H' + R"):
    """``cross @ inv(S)`` via a Cholesky solve of the symmetric matrix ``S``."""
    cf = _factor(np.atleast_2d(S), name)
    return linalg.cho_solve(cf, np.atleast_2d(cross).T, check_finite=False).T


def kalman_gain(fc, H, R) -> np.ndarray:
    """``Sigma H' (H Sigma H' + R)^{-1}`` without forming an explicit inverse."""
    cov = fc.cov if isinstance(fc, GaussianSummary) else np.atleast_2d(fc)
    H = np.atleast_2d(H)
    R = np.atleast_2d(R)
    if H.shape[1] != cov.shape[0] or R.shape != (H.shape[0], H.shape[0]):
        raise DimensionError(f"incompatible shapes H {H.shape}, Sigma {cov.shape}, R {R.shape}")
    PHt = cov @ H.T
    return solve_gain(PHt, H @ PHt + R)


def sqrt_factor(cov):
    """Left factor ``L`` with ``L L' = cov``; falls back to eigh for PSD input."""
    cov = np.atleast_2d(cov)
    if cov.shape[0] == 1:
        return np.sqrt(np.maximum(cov, 0.0))
    off = cov - np.diag(np.diag(cov))
    if not np.any(off):
        return np.diag(np.sqrt(np.maximum(np.diag(cov), 0.0)))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def mvn_noise(rng, cov, size, factor=None):
    """``size`` draws from ``N(0, cov)`` as columns of a ``(dim, size)`` array."""
    L = sqrt_factor(cov) if factor is None else factor
    return L @ rng.standard_normal((L.shape[1], size))


def is_zero(M):
    return M is None or not np.any(M)


def psd_ok(M, rel=1e-8):
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return w[0] >= -rel * max(abs(w[-1]), np.finfo(float).tiny)


def resolve_taper(taper, n):
    """Taper matrix from a ``TaperSpec``, an explicit matrix, or ``None`` (no tapering)."""
    if taper is None:
        return np.ones((n, n))
    if isinstance(taper, TaperSpec):
        return taper_matrix(taper, n)
    T = np.asarray(taper, dtype=float)
    if T.shape != (n, n):
        raise DimensionError(f"taper matrix has shape {T.shape}, expected {(n, n)}")
    return T
