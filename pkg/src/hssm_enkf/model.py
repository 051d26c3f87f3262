"""Hierarchical state-space models and the concrete instances used in the experiments.

A model couples four layers:

* transformation ``z_t | y_t, theta_t`` (an :class:`~hssm_enkf.obs_models.ObsModel`),
* observation ``y_t = H_t x_t + v_t`` with ``v_t ~ N(0, R_t)``,
* evolution ``x_t = M_t(x_{t-1}) + w_t`` with ``w_t ~ N(0, Q_t)``,
* parameters ``theta_t ~ p_t(. | theta_{t-1})``.

Parameters are plain 1-D float arrays; ``HssmModel.param_names`` labels them.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numba import njit
from scipy import stats

from .ensemble import index_distances, mvn_noise
from .errors import ConfigurationError, DivergenceError, ParameterDomainError
from .obs_models import (
    IdentityObs,
    ObsModel,
    PoissonLog,
    Rainfall,
    ScaleMixtureT,
    VAR_FLOOR,
    lognormal_kappa_prior,
)
from .rng import stream

# --------------------------------------------------------------------------
# covariance functions


def matern15(d, lam=1.0):
    """Matern correlation with smoothness 1.5 evaluated at ``u = d / lam``."""
    if not np.all(np.asarray(lam) > 0):
        raise ParameterDomainError("Matern scale must be positive")
    u = np.sqrt(3.0) * np.asarray(d, dtype=float) / lam
    return (1.0 + u) * np.exp(-u)


def powered_exponential(d, power=1.8, scale=10.0):
    if not scale > 0 or not 0 < power <= 2:
        raise ParameterDomainError("powered exponential needs scale > 0 and power in (0, 2]")
    return np.exp(-((np.asarray(d, dtype=float) / scale) ** power))


@dataclass(frozen=True)
class CovFunction:
    """Stationary covariance on an integer grid: ``amplitude * corr(|i - j|)``."""

    family: str = "matern_smooth15"
    scale: float = 1.0
    power: float = 1.8
    amplitude: float = 1.0
    matrix: Optional[np.ndarray] = None

    def corr(self, d):
        if self.family == "matern_smooth15":
            return matern15(d, self.scale)
        if self.family == "powered_exponential":
            return powered_exponential(d, self.power, self.scale)
        raise ConfigurationError(f"unknown covariance family {self.family!r}")

    def __call__(self, n):
        if self.family == "from_matrix":
            C = np.asarray(self.matrix, dtype=float)
            if C.shape != (n, n):
                raise ConfigurationError(f"covariance matrix has shape {C.shape}, expected {(n, n)}")
            return self.amplitude * C
        return self.amplitude * self.corr(index_distances(n))


# --------------------------------------------------------------------------
# parameter distributions


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    sd: np.ndarray

    def sample(self, rng, size):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        return mean + np.atleast_1d(self.sd) * rng.standard_normal((size, mean.size))

    def logpdf(self, theta):
        return np.sum(stats.norm.logpdf(np.atleast_2d(theta), np.atleast_1d(self.mean), np.atleast_1d(self.sd)), axis=-1)


@dataclass(frozen=True)
class InverseGammaPrior:
    """Independent ``IG(a, b)`` components."""

    a: float
    b: float
    dim: int = 1

    def sample(self, rng, size):
        return self.b / rng.gamma(self.a, 1.0, size=(size, self.dim))

    def logpdf(self, theta):
        return np.sum(stats.invgamma.logpdf(np.atleast_2d(theta), self.a, scale=self.b), axis=-1)


@dataclass(frozen=True)
class LogNormalPrior:
    median: float
    log_sd: float
    dim: int = 1

    def sample(self, rng, size):
        return self.median * np.exp(self.log_sd * rng.standard_normal((size, self.dim)))

    def logpdf(self, theta):
        f = lognormal_kappa_prior(self.median, self.log_sd)
        th = np.atleast_2d(theta)
        return np.array([sum(f(v) for v in row) for row in th])


@dataclass(frozen=True)
class RandomWalk:
    """``theta_t ~ N(theta_{t-1}, diag(sd^2))``; ``sd = 0`` gives a static parameter."""

    sd: np.ndarray

    def sample(self, prev, rng, t=None):
        prev = np.atleast_2d(prev)
        sd = np.broadcast_to(np.asarray(self.sd, dtype=float), prev.shape[1:])
        return prev + sd * rng.standard_normal(prev.shape)

    def logpdf(self, theta, prev, t=None):
        sd = np.asarray(self.sd, dtype=float)
        if not np.any(sd):
            return np.where(np.all(np.atleast_2d(theta) == np.atleast_2d(prev), axis=-1), 0.0, -np.inf)
        return np.sum(stats.norm.logpdf(np.atleast_2d(theta), np.atleast_2d(prev), sd), axis=-1)


@dataclass(frozen=True)
class IndependentDraw:
    """Parameters drawn afresh from ``prior`` at every time point."""

    prior: object

    def sample(self, prev, rng, t=None):
        return self.prior.sample(rng, np.atleast_2d(prev).shape[0])

    def logpdf(self, theta, prev, t=None):
        return self.prior.logpdf(theta)


# --------------------------------------------------------------------------
# the model container


def _zero_cov(n):
    return np.zeros((n, n))


@dataclass(frozen=True)
class HssmModel:
    """Four-layer hierarchical state-space model.

    ``evolve(X, theta, t)`` maps an ``(n, N)`` matrix of states column-wise;
    ``obs_matrix``, ``obs_cov`` and ``innov_cov`` take ``(theta, t)``.
    """

    n: int
    evolve: Callable
    obs_matrix: Callable
    obs_cov: Callable
    innov_cov: Callable
    mu0: np.ndarray
    Sigma0: np.ndarray
    obs: ObsModel = field(default_factory=IdentityObs)
    param_names: tuple = ()
    param_init: Optional[object] = None
    param_transition: Optional[object] = None
    forecast_independent: bool = False
    linear_evolution: Optional[Callable] = None
    T: int = 1
    name: str = "custom"
    constants: dict = field(default_factory=dict)

    # layer accessors ------------------------------------------------------
    def H(self, theta=None, t=1):
        return np.atleast_2d(self.obs_matrix(theta, t))

    def R(self, theta=None, t=1):
        return np.atleast_2d(self.obs_cov(theta, t))

    def Q(self, theta=None, t=1):
        return np.atleast_2d(self.innov_cov(theta, t))

    def M(self, X, theta=None, t=1):
        X = np.asarray(X, dtype=float)
        one = X.ndim == 1
        out = self.evolve(X[:, None] if one else X, theta, t)
        return out[:, 0] if one else out

    def obs_dim(self, t=1, theta=None):
        return self.H(theta, t).shape[0]

    @property
    def n_params(self):
        return len(self.param_names)

    def with_constants(self, **kw):
        c = dict(self.constants)
        c.update(kw)
        return replace(self, constants=c)


@dataclass
class SimulatedData:
    x: np.ndarray  # (T, n) true states at t = 1..T
    y: list  # latent observations per time
    z: list  # data per time
    theta: np.ndarray  # (T + 1, p) parameters at t = 0..T
    x0: np.ndarray = None


def simulate(model: HssmModel, rng, T=None, theta0=None):
    """Draw one trajectory ``(theta_{0:T}, x_{0:T}, y_{1:T}, z_{1:T})`` from ``model``."""
    T = model.T if T is None else T
    p = model.n_params
    thetas = np.zeros((T + 1, p))
    if p:
        thetas[0] = model.param_init.sample(rng, 1)[0] if theta0 is None else np.asarray(theta0, dtype=float)
    x = np.asarray(model.mu0, dtype=float) + mvn_noise(rng, model.Sigma0, 1)[:, 0]
    x0 = x.copy()
    xs, ys, zs = [], [], []
    for t in range(1, T + 1):
        if p:
            thetas[t] = model.param_transition.sample(thetas[t - 1], rng, t)[0]
        th = thetas[t] if p else None
        Q = model.Q(th, t)
        x = model.M(x, th, t)
        if np.any(Q):
            x = x + mvn_noise(rng, Q, 1)[:, 0]
        H = model.H(th, t)
        y = H @ x + mvn_noise(rng, model.R(th, t), 1)[:, 0]
        z = model.obs.transform(y, rng=rng, **_obs_params(model, th))
        xs.append(x.copy())
        ys.append(y)
        zs.append(z)
    return SimulatedData(np.array(xs), ys, zs, thetas, x0)


def _obs_params(model, theta):
    """Keyword parameters of the transformation layer carried inside ``theta``."""
    if isinstance(model.obs, Rainfall) and "kappa" in model.param_names and theta is not None:
        return {"kappa": float(theta[model.param_names.index("kappa")])}
    return {}


obs_params = _obs_params


# --------------------------------------------------------------------------
# Lorenz-96


def _l96_drift(x, F):
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + F


def lorenz96_step(x, F=8.0, delta=0.2, substeps=40, t0=0.0):
    """Forward-Euler integration of Lorenz-96 over ``delta`` in ``substeps`` steps.

    ``x`` may be a vector or an ``(n, N)`` matrix of column states.
    """
    if not delta > 0 or substeps < 1:
        raise ParameterDomainError("need delta > 0 and substeps >= 1")
    x = np.array(x, dtype=float)
    h = delta / substeps
    for k in range(substeps):
        x = x + h * _l96_drift(x, F)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("Lorenz-96 integration diverged", time=t0 + (k + 1) * h)
    return x


@njit(cache=True)
def _l96_run(x, F, h, substeps, burn_in_steps, sample_steps):
    n = x.size
    traj = np.empty((sample_steps, n))
    dx = np.empty(n)
    for s in range(burn_in_steps + sample_steps):
        for _ in range(substeps):
            for i in range(n):
                dx[i] = (x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + F
            for i in range(n):
                x[i] += h * dx[i]
        if not np.all(np.isfinite(x)):
            return traj, s
        if s >= burn_in_steps:
            traj[s - burn_in_steps] = x
    return traj, -1


def lorenz_climatology(F=8.0, delta=0.2, burn_in_steps=1000, sample_steps=50000, seed=0, n=40, substeps=40):
    """Sample covariance of a long Lorenz-96 trajectory recorded every ``delta``."""
    if sample_steps < 1000:
        raise ParameterDomainError("sample_steps must be at least 1000")
    rng = stream(seed, "lorenz-climatology")
    x = F + rng.standard_normal(n)
    traj, fail = _l96_run(x, float(F), delta / substeps, int(substeps), int(burn_in_steps), int(sample_steps))
    if fail >= 0:
        raise DivergenceError("Lorenz-96 climatology run diverged", time=(fail + 1) * delta)
    C = np.cov(traj, rowvar=False)
    return 0.5 * (C + C.T)


@lru_cache(maxsize=8)
def _cached_climatology(F, delta, burn_in_steps, sample_steps, seed, n, substeps):
    C = lorenz_climatology(F, delta, burn_in_steps, sample_steps, seed, n, substeps)
    C.setflags(write=False)
    return C


# --------------------------------------------------------------------------
# cloud advection


def cloud_evolution_matrix(g1, g2, g3, n):
    """Tridiagonal matrix: ``g1`` on the diagonal, ``g2`` above it, ``g3`` below it."""
    if n < 2:
        raise ParameterDomainError("cloud transect needs n >= 2")
    M = g1 * np.eye(n)
    M += g2 * np.eye(n, k=1)
    M += g3 * np.eye(n, k=-1)
    return M


CLOUD_PARAMS = ("gamma1", "gamma2", "gamma3", "log_sigma", "log_tau", "log_lambda")
CLOUD_THETA0 = (0.3, 0.3, 0.3, np.log(0.1), np.log(1.5), np.log(8.0))


# --------------------------------------------------------------------------
# builders


def _identity_evolve(X, theta, t):
    return np.array(X, dtype=float)


def build_iid_single_time(n=1, kappa=4.0, theta=1.0):
    """Single-time model with forecast ``N(0, kappa I)``, ``H = I``, ``R = theta I`` and ``Q = 0``."""
    return HssmModel(
        n=n,
        evolve=_identity_evolve,
        obs_matrix=lambda th, t: np.eye(n),
        obs_cov=lambda th, t: (theta if th is None else float(np.atleast_1d(th)[0])) * np.eye(n),
        innov_cov=lambda th, t: _zero_cov(n),
        mu0=np.zeros(n),
        Sigma0=kappa * np.eye(n),
        param_names=("theta",),
        T=1,
        name="iid_single_time",
        constants={"kappa": kappa, "theta": theta},
    )


def build_linear_gaussian(M, H, Q, R, mu0, Sigma0, T=5, name="linear_gaussian"):
    """Time-invariant linear-Gaussian model with known matrices."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return HssmModel(
        n=M.shape[0],
        evolve=lambda X, th, t: M @ X,
        obs_matrix=lambda th, t: H,
        obs_cov=lambda th, t: R,
        innov_cov=lambda th, t: Q,
        mu0=np.asarray(mu0, dtype=float),
        Sigma0=np.atleast_2d(np.asarray(Sigma0, dtype=float)),
        linear_evolution=lambda th, t: M,
        T=T,
        name=name,
    )


def build_obs_variance_toy(n=5, a=3.0, b=2.0, mean=0.0, cov_scale=2.0, sill=1.0):
    """Conjugate toy: ``y | x, theta ~ N(x, theta I)``, ``x ~ N(mu, Sigma)``, ``theta ~ IG(a, b)``."""
    Sigma = sill * matern15(index_distances(n), cov_scale)
    prior = InverseGammaPrior(a, b, 1)
    return HssmModel(
        n=n,
        evolve=_identity_evolve,
        obs_matrix=lambda th, t: np.eye(n),
        obs_cov=lambda th, t: float(np.atleast_1d(th)[0]) * np.eye(n),
        innov_cov=lambda th, t: _zero_cov(n),
        mu0=np.full(n, float(mean)),
        Sigma0=Sigma,
        param_names=("theta",),
        param_init=prior,
        param_transition=IndependentDraw(prior),
        forecast_independent=True,
        T=1,
        name="obs_variance_toy",
        constants={"a": a, "b": b},
    )


def build_sim_study(
    scenario="heavy_tailed",
    n=100,
    m=75,
    mean=0.2,
    power=1.8,
    scale=10.0,
    sill=1.0,
    sigma=0.2,
    kappa=None,
    obs_seed=0,
    obs_index=None,
    kappa_prior=(3.0, 0.5),
):
    """Single-time non-Gaussian update study on a 1-D grid of ``n`` cells.

    ``scenario`` is ``heavy_tailed`` (t noise via inverse-gamma mixing scales),
    ``rainfall_known`` or ``rainfall_unknown`` (power ``kappa`` unknown).
    """
    if obs_index is None:
        rng = stream(obs_seed, "sim-study-locations")
        obs_index = np.sort(rng.choice(n, size=m, replace=False))
    obs_index = np.asarray(obs_index, dtype=int)
    m = obs_index.size
    H = np.eye(n)[obs_index]
    Sigma0 = sill * powered_exponential(index_distances(n), power, scale)
    const = dict(scenario=scenario, n=n, m=m, mean=mean, power=power, scale=scale, sill=sill, sigma=sigma)
    common = dict(
        n=n,
        evolve=_identity_evolve,
        obs_matrix=lambda th, t: H,
        innov_cov=lambda th, t: _zero_cov(n),
        mu0=np.full(n, float(mean)),
        Sigma0=Sigma0,
        forecast_independent=True,
        T=1,
        name="sim_study",
    )
    if scenario == "heavy_tailed":
        kappa = 2.0 if kappa is None else kappa
        obs = ScaleMixtureT(kappa=kappa, sigma=sigma)
        prior = InverseGammaPrior(kappa / 2.0, kappa / 2.0, m)
        return HssmModel(
            obs_cov=lambda th, t: np.diag(sigma**2 * np.asarray(th, dtype=float)),
            obs=obs,
            param_names=tuple(f"scale{l}" for l in range(m)),
            param_init=prior,
            param_transition=IndependentDraw(prior),
            constants={**const, "kappa": kappa, "obs_index": obs_index},
            **common,
        )
    if scenario in ("rainfall_known", "rainfall_unknown"):
        kappa = 3.0 if kappa is None else kappa
        obs = Rainfall(kappa=kappa, sigma=sigma)
        R = sigma**2 * np.eye(m)
        kw = dict(obs_cov=lambda th, t: R, obs=obs)
        if scenario == "rainfall_unknown":
            prior = LogNormalPrior(*kappa_prior)
            kw.update(param_names=("kappa",), param_init=prior, param_transition=IndependentDraw(prior))
        return HssmModel(constants={**const, "kappa": kappa, "obs_index": obs_index, "kappa_prior": tuple(kappa_prior)}, **kw, **common)
    raise ConfigurationError(f"unknown sim_study scenario {scenario!r}")


def cloud_theta_parts(theta):
    th = np.asarray(theta, dtype=float)
    return th[0], th[1], th[2], np.exp(th[3]), np.exp(th[4]), np.exp(th[5])


def build_cloud(
    n=60,
    T=80,
    obs_index=None,
    walk_sd=0.05,
    theta0=CLOUD_THETA0,
    theta0_sd=0.0,
    mu0=-2.0,
    sigma0_amp=0.2,
    sigma0_scale=5.0,
):
    """Poisson cloud-advection model with tridiagonal linear evolution.

    ``obs_index[t - 1]`` lists the observed cells at time ``t``; by default all
    cells are observed.  ``theta0_sd`` spreads the initial parameter law
    around ``theta0``.
    """
    d = index_distances(n)
    eye = np.eye(n)

    def H(th, t):
        if obs_index is None:
            return eye
        return eye[np.asarray(obs_index[t - 1], dtype=int)]

    def R(th, t):
        s = np.exp(float(np.asarray(th)[3]))
        m = H(th, t).shape[0]
        return max(s * s, VAR_FLOOR) * np.eye(m)

    def Q(th, t):
        _, _, _, _, tau, lam = cloud_theta_parts(th)
        return tau**2 * matern15(d, lam)

    def M_lin(th, t):
        g1, g2, g3 = np.asarray(th, dtype=float)[:3]
        return cloud_evolution_matrix(g1, g2, g3, n)

    def evolve(X, th, t):
        return M_lin(th, t) @ X

    p = len(CLOUD_PARAMS)
    return HssmModel(
        n=n,
        evolve=evolve,
        obs_matrix=H,
        obs_cov=R,
        innov_cov=Q,
        mu0=np.full(n, float(mu0)),
        Sigma0=sigma0_amp * matern15(d, sigma0_scale),
        obs=PoissonLog(),
        param_names=CLOUD_PARAMS,
        param_init=GaussianPrior(np.asarray(theta0, dtype=float), np.full(p, float(theta0_sd))),
        param_transition=RandomWalk(np.full(p, float(walk_sd))),
        forecast_independent=False,
        linear_evolution=M_lin,
        T=T,
        name="cloud",
        constants={"walk_sd": walk_sd, "theta0": tuple(theta0)},
    )


def build_lorenz96(
    n=40,
    F=8.0,
    delta=0.2,
    substeps=40,
    T=10,
    q_scale=0.2,
    prior_mean=0.8,
    prior_sd=0.2,
    climatology=None,
    clim_seed=0,
    clim_burn_in=1000,
    clim_steps=50000,
):
    """Lorenz-96 model scaled by an unknown static ``theta``.

    ``x_1 ~ N(0, Sigma_L)``; for ``t >= 2`` the state evolves as
    ``theta * L(x_{t-1}) + w_t`` with ``w_t ~ N(0, q_scale * Sigma_L)``.
    """
    if climatology is None:
        climatology = _cached_climatology(F, delta, clim_burn_in, clim_steps, clim_seed, n, substeps)
    S = np.array(climatology, dtype=float)
    Q = q_scale * S
    zero = _zero_cov(n)
    eye = np.eye(n)

    def L(X):
        return lorenz96_step(X, F, delta, substeps)

    def evolve(X, th, t):
        if t <= 1:
            return np.array(X, dtype=float)
        # a (1, N) parameter matrix scales each member separately
        return np.asarray(th, dtype=float)[0] * L(X)

    return HssmModel(
        n=n,
        evolve=evolve,
        obs_matrix=lambda th, t: eye,
        obs_cov=lambda th, t: eye,
        innov_cov=lambda th, t: zero if t <= 1 else Q,
        mu0=np.zeros(n),
        Sigma0=S,
        param_names=("theta",),
        param_init=GaussianPrior(np.array([prior_mean]), np.array([prior_sd])),
        param_transition=RandomWalk(np.zeros(1)),
        forecast_independent=False,
        T=T,
        name="lorenz96",
        constants={
            "F": F,
            "delta": delta,
            "substeps": substeps,
            "q_scale": q_scale,
            "prior_mean": prior_mean,
            "prior_sd": prior_sd,
            "base_evolution": L,
            "vectorized_theta": True,
        },
    )


BUILDERS = {
    "obs_variance_toy": build_obs_variance_toy,
    "sim_study": build_sim_study,
    "cloud": build_cloud,
    "lorenz96": build_lorenz96,
}


def build_named_model(name, **overrides):
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None
    return builder(**overrides)
