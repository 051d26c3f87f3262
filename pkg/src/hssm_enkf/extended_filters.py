"""Extended EnKFs for models with unknown parameters and non-Gaussian data.

* ``genkf_step``: Gibbs sampler whose state step is an EnKF shift (one shared
  ensemble, requires forecast independence).
* ``penkf_step``: particle filter over parameters, each particle carrying its
  own ensemble; weights use the integrated EnKF likelihood.
* ``penkf_step_fi``: the same with one shared ensemble under forecast independence.
* ``earbpf_step``: the particle-filter baseline where every parameter particle
  runs a local particle filter on the state.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import special

from .enkf import analysis, draw_perturbations, initial_ensemble
from .ensemble import is_zero, regularized_cov, resolve_taper, sqrt_factor
from .errors import ConfigurationError, ContractError, DegeneracyError
from .likelihood import integrated_loglik, laplace_batch, mvn_logpdf
from .model import obs_params
from .obs_models import (
    Rainfall,
    ScaleMixtureT,
    lognormal_kappa_prior,
    mh_update_kappa,
)

# --------------------------------------------------------------------------
# weights and resampling


def normalize_log_weights(lw, time=None):
    lw = np.asarray(lw, dtype=float)
    mx = np.max(lw)
    if not np.isfinite(mx):
        raise DegeneracyError("all particle weights vanished", max_log_weight=float(mx), time=time)
    return lw - special.logsumexp(lw)


def ess(log_w):
    w = np.exp(log_w)
    return float(1.0 / np.sum(w * w))


def resample_indices(weights, scheme="systematic", rng=None, size=None):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    M = w.size if size is None else size
    if scheme == "multinomial":
        return np.sort(rng.choice(w.size, size=M, p=w))
    if scheme == "systematic":
        u = (rng.random() + np.arange(M)) / M
        c = np.cumsum(w)
        c[-1] = 1.0
        return np.searchsorted(c, u, side="right")
    raise ConfigurationError(f"unknown resampling scheme {scheme!r}")


@dataclass
class ParticleSystem:
    """Parameter particles, each with an ensemble of ``N`` state members.

    ``ens`` has shape ``(M, n, N)`` (``N = 1`` and a shared ensemble in the
    forecast-independent variant, where ``ens`` is ``(1, n, M_x)``).
    ``log_w`` holds normalized log weights.
    """

    theta: np.ndarray  # (M, p)
    log_w: np.ndarray  # (M,)
    ens: np.ndarray
    t: int = 0
    theta_paths: Optional[np.ndarray] = None  # (t + 1, M, p)
    state_paths: Optional[list] = None  # per time (M, n, N), when stored
    ancestors: list = field(default_factory=list)  # per time (M,) parent indices

    @property
    def M(self):
        return self.theta.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_w)

    @property
    def ess(self):
        return ess(self.log_w)

    def weighted_theta_mean(self):
        return self.weights @ self.theta


def init_particle_system(model, M, N, rng, store_paths=False, store_states=False, theta0=None):
    theta = model.param_init.sample(rng, M) if theta0 is None else np.array(np.atleast_2d(theta0), dtype=float)
    if theta.shape[0] == 1 and M > 1:
        theta = np.repeat(theta, M, axis=0)
    ens = np.stack([initial_ensemble(model, N, rng) for _ in range(M)])
    return ParticleSystem(
        theta=theta,
        log_w=np.full(M, -np.log(M)),
        ens=ens,
        theta_paths=theta[None].copy() if store_paths else None,
        state_paths=[] if store_states else None,
    )


def resample(system: ParticleSystem, scheme="systematic", rng=None):
    idx = resample_indices(system.weights, scheme, rng)
    return _select(system, idx)


def _select(system, idx):
    paths = None if system.theta_paths is None else system.theta_paths[:, idx]
    states = None if system.state_paths is None else [s[idx] for s in system.state_paths]
    anc = [a[idx] for a in system.ancestors] if system.ancestors else []
    return ParticleSystem(
        theta=system.theta[idx].copy(),
        log_w=np.full(idx.size, -np.log(idx.size)),
        ens=system.ens[idx].copy(),
        t=system.t,
        theta_paths=paths,
        state_paths=states,
        ancestors=anc + [idx],
    )


def liu_west_refresh(theta, weights, h, rng):
    """Kernel shrinkage move that preserves the weighted mean and covariance.

    ``theta_new = a theta + (1 - a) mean + h V^{1/2} eps`` with ``a = sqrt(1 - h^2)``.
    """
    if not 0 <= h < 1:
        raise ConfigurationError("Liu-West bandwidth h must lie in [0, 1)")
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    if h == 0:
        return th.copy()
    a = np.sqrt(1.0 - h * h)
    mean = w @ th
    A = th - mean
    V = (A * w[:, None]).T @ A
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        L = np.diag(np.sqrt(np.maximum(np.diag(V), 0.0)))
    eps = rng.standard_normal(th.shape)
    return a * th + (1.0 - a) * mean + h * eps @ L.T


# --------------------------------------------------------------------------
# full conditionals for the parameter layer


def default_theta_fcd(model):
    """Full-conditional sampler for the parameters of a built-in model.

    Returns ``(fcd, collapsed)`` where ``fcd(rng, z, y, x, theta, theta_prev, t)``
    draws new parameters and ``collapsed`` says whether the draw integrates
    over ``y`` (then ``y`` is refreshed after the parameter update).
    """
    if model.n_params == 0:
        return None, False
    obs = model.obs
    if isinstance(obs, ScaleMixtureT):

        def fcd(rng, z, y, x, theta, theta_prev, t):
            return obs.sample_scales_fcd(y, model.H(theta, t) @ x, rng)

        return fcd, False
    if isinstance(obs, Rainfall) and model.param_names == ("kappa",):
        median, log_sd = model.constants.get("kappa_prior", (3.0, 0.5))
        log_prior = lognormal_kappa_prior(median, log_sd)
        sd = model.constants.get("kappa_proposal_sd", 0.1)

        def fcd(rng, z, y, x, theta, theta_prev, t):
            k = mh_update_kappa(z, x, model.H(theta, t), obs.sigma, float(theta[0]), log_prior, sd, rng)
            return np.array([k])

        return fcd, True
    if model.name == "obs_variance_toy":
        a, b = model.constants["a"], model.constants["b"]

        def fcd(rng, z, y, x, theta, theta_prev, t):
            r = np.asarray(y) - model.H(theta, t) @ x
            return np.array([(b + 0.5 * r @ r) / rng.gamma(a + 0.5 * r.size)])

        return fcd, False
    raise ConfigurationError(f"no parameter full conditional available for model {model.name!r}")


def _obs_var(model, theta, t):
    return np.diag(model.R(theta, t))


def _theta_key(theta):
    return None if theta is None else np.asarray(theta, dtype=float).tobytes()


def _grouped_analysis(Xf, Y, model, thetas, t, P, Zw, Zv):
    """EnKF shifts of each column of ``Xf`` toward the matching column of ``Y``.

    Columns sharing a parameter value share one gain; perturbations are the
    standard normals ``Zw`` (may be ``None``) and ``Zv`` scaled per parameter.
    """
    Xa = np.empty_like(Xf)
    groups = {}
    for i, th in enumerate(thetas):
        groups.setdefault(_theta_key(th), []).append(i)
    for key, idx in groups.items():
        th = thetas[idx[0]]
        idx = np.asarray(idx)
        Q = model.Q(th, t)
        R = model.R(th, t)
        W = None if (Zw is None or is_zero(Q)) else sqrt_factor(Q) @ Zw[:, idx]
        V = sqrt_factor(R) @ Zv[:, idx]
        Pg = P if is_zero(Q) else P + Q
        Xa[:, idx] = analysis(Xf[:, idx], Y[:, idx], model.H(th, t), R, Q, None, None, W=W, V=V, P=Pg)[0]
    return Xa


# --------------------------------------------------------------------------
# GEnKF


@dataclass
class GenkfState:
    x: np.ndarray  # (n, M) filtering members
    theta: Optional[np.ndarray]  # (M, p) or None
    y: np.ndarray  # (m, M) latent observations
    t: int = 0
    diagnostics: dict = field(default_factory=dict)


def genkf_step(
    model,
    x_prev,
    theta_prev,
    z,
    taper=None,
    iters=3,
    rng=None,
    t=1,
    theta_fcd=None,
    collapsed=None,
    y_prev=None,
):
    """One time step of the Gibbs ensemble Kalman filter.

    Each chain ``i`` sweeps ``iters`` times through (a) an EnKF shift of its
    forecast member toward ``y_i`` under ``theta_i``, (b) a draw of ``y_i``
    from its full conditional and (c) a draw of ``theta_i`` from its full
    conditional; with ``collapsed`` parameter updates the order is (a), (c), (b).
    Parameters start from the transition law; ``y_i`` starts from its full
    conditional given the forecast member unless ``y_prev`` is given.
    """
    if not model.forecast_independent:
        raise ContractError("GEnKF requires a model flagged forecast-independent")
    X = np.asarray(x_prev, dtype=float)
    n, M = X.shape
    if theta_fcd is None and model.n_params:
        theta_fcd, default_collapsed = default_theta_fcd(model)
        collapsed = default_collapsed if collapsed is None else collapsed
    collapsed = bool(collapsed)
    z = model.obs.check_data(z)
    p = model.n_params

    # Step 1: one shared forecast, shared regularized covariance
    Xf = model.evolve(X, None, t)
    P = regularized_cov(Xf, None, None, taper=resolve_taper(taper, n)).cov

    # Step 2: starting values
    if p:
        prev = model.param_init.sample(rng, M) if theta_prev is None else np.atleast_2d(theta_prev)
        thetas = model.param_transition.sample(prev, rng, t)
    else:
        prev = None
        thetas = None
    th_list = [None if thetas is None else thetas[i] for i in range(M)]
    if y_prev is not None:
        Y = np.array(y_prev, dtype=float)
    elif model.obs.degenerate:
        Y = np.repeat(z[:, None], M, axis=1)
    else:
        Y = np.column_stack([_draw_y(model, z, Xf[:, i], th_list[i], t, rng, None) for i in range(M)])

    # Step 3: Gibbs sweeps
    Q0 = model.Q(th_list[0], t)
    theta_change = []
    Xa = Xf
    for g in range(iters):
        Zw = None if is_zero(Q0) else rng.standard_normal((n, M))
        Zv = rng.standard_normal((Y.shape[0], M))
        Xa = _grouped_analysis(Xf, Y, model, th_list, t, P, Zw, Zv)
        old_mean = None if thetas is None else thetas.mean(axis=0)
        if collapsed:
            thetas, th_list = _draw_thetas(theta_fcd, model, z, Y, Xa, th_list, prev, t, rng)
            if not model.obs.degenerate:
                Y = np.column_stack([_draw_y(model, z, Xa[:, i], th_list[i], t, rng, Y[:, i]) for i in range(M)])
        else:
            if not model.obs.degenerate:
                Y = np.column_stack([_draw_y(model, z, Xa[:, i], th_list[i], t, rng, Y[:, i]) for i in range(M)])
            if theta_fcd is not None:
                thetas, th_list = _draw_thetas(theta_fcd, model, z, Y, Xa, th_list, prev, t, rng)
        if thetas is not None:
            new_mean = thetas.mean(axis=0)
            theta_change.append(float(np.max(np.abs(new_mean - old_mean) / (np.abs(old_mean) + 1e-12))))
    return GenkfState(Xa, thetas, Y, t, {"theta_rel_change": theta_change})


def _draw_y(model, z, x, theta, t, rng, y_cur):
    hx = model.H(theta, t) @ x
    return model.obs.sample_y(z, hx, _obs_var(model, theta, t), rng, y_current=y_cur, **obs_params(model, theta))


def _draw_thetas(theta_fcd, model, z, Y, Xa, th_list, prev, t, rng):
    M = Xa.shape[1]
    new = np.array(
        [theta_fcd(rng, z, Y[:, i], Xa[:, i], th_list[i], None if prev is None else prev[i], t) for i in range(M)]
    )
    return new, [new[i] for i in range(M)]


def genkf_run(model, z_seq, M, taper=None, iters=3, rng=None, theta_fcd=None, collapsed=None):
    """GEnKF over ``t = 1..T``, carrying ``(y, theta)`` between steps."""
    X = initial_ensemble(model, M, rng)
    theta = None
    out = []
    for t, z in enumerate(z_seq, start=1):
        st = genkf_step(model, X, theta, z, taper, iters, rng, t, theta_fcd, collapsed)
        out.append(st)
        X, theta = st.x, st.theta
    return out


# --------------------------------------------------------------------------
# PEnKF


def _propose(model, system, proposal, rng, t):
    """New parameters and the log correction ``log p - log q``."""
    prev = system.theta
    if proposal is None:
        return model.param_transition.sample(prev, rng, t), np.zeros(system.M)
    new = proposal.sample(prev, rng, t)
    corr = model.param_transition.logpdf(new, prev, t) - proposal.logpdf(new, prev, t)
    return new, np.asarray(corr, dtype=float)


def _state_update(model, Xf, z, theta, t, taper_mat, rng, lap=None, fc=None):
    """Filtering members given forecast ``Xf``: EnKF shift toward ``z`` or toward Laplace draws of ``y``."""
    N = Xf.shape[1]
    if model.obs.degenerate:
        target = z
    else:
        target = lap.sample(rng, N)
    P = None if fc is None else fc.cov
    return analysis(Xf, target, model.H(theta, t), model.R(theta, t), model.Q(theta, t), taper_mat, rng, P=P)[0]


def penkf_step(
    model,
    system: ParticleSystem,
    z,
    proposal=None,
    taper=None,
    strategy="laplace",
    resample_scheme="systematic",
    ess_threshold=0.5,
    rng=None,
    t=None,
    liu_west_h=None,
):
    """One step of the particle ensemble Kalman filter.

    Every parameter particle proposes new parameters, forecasts its own
    ensemble, is weighted by the integrated EnKF likelihood and updates its
    members (Laplace draw of ``y`` followed by an EnKF shift).  Particles are
    resampled when the effective sample size drops below
    ``ess_threshold * M``; ``liu_west_h`` adds a kernel refresh afterwards.
    """
    t = system.t + 1 if t is None else t
    M, n, N = system.ens.shape
    z = model.obs.check_data(z)
    thetas, log_corr = _propose(model, system, proposal, rng, t)
    taper_mat = resolve_taper(taper, n)
    lw = np.array(system.log_w, dtype=float)
    new_ens = np.empty_like(system.ens)
    lls = np.empty(M)
    for i in range(M):
        th = thetas[i]
        Xf = model.evolve(system.ens[i], th, t)
        est = integrated_loglik(Xf, z, model, th, strategy, taper_mat, t, rng, obs_params=obs_params(model, th))
        lls[i] = est.value
        lap = est.details.get("laplace")
        new_ens[i] = _state_update(model, Xf, z, th, t, taper_mat, rng, lap)
    lw = normalize_log_weights(lw + lls + log_corr, time=t)
    out = ParticleSystem(
        theta=thetas,
        log_w=lw,
        ens=new_ens,
        t=t,
        theta_paths=None if system.theta_paths is None else np.concatenate([system.theta_paths, thetas[None]]),
        state_paths=None if system.state_paths is None else system.state_paths + [new_ens.copy()],
        ancestors=list(system.ancestors),
    )
    out = _maybe_resample(out, ess_threshold, resample_scheme, rng, liu_west_h)
    return out, {"t": t, "ess": ess(lw), "loglik_mean": float(np.mean(lls)), "max_log_weight": float(np.max(lw))}


def _maybe_resample(system, ess_threshold, scheme, rng, liu_west_h):
    M = system.M
    if system.ess < ess_threshold * M:
        system = resample(system, scheme, rng)
        if liu_west_h:
            system.theta = liu_west_refresh(system.theta, np.ones(M), liu_west_h, rng)
    elif liu_west_h:
        system.theta = liu_west_refresh(system.theta, system.weights, liu_west_h, rng)
    return system


def penkf_run(model, z_seq, M, N, rng, proposal=None, taper=None, strategy="laplace", store_paths=False, **kw):
    system = init_particle_system(model, M, N, rng, store_paths=store_paths)
    history = []
    diags = []
    for t, z in enumerate(z_seq, start=1):
        system, d = penkf_step(model, system, z, proposal, taper, strategy, rng=rng, t=t, **kw)
        history.append(system)
        diags.append(d)
    return history, diags


@dataclass
class SharedSystem:
    """Forecast-independent PEnKF state: one ensemble and a cloud of weighted parameters."""

    x: np.ndarray  # (n, M_x)
    theta: np.ndarray  # (M_theta, p)
    log_w: np.ndarray
    t: int = 0
    evolve_calls: int = 0

    @property
    def weights(self):
        return np.exp(self.log_w)

    @property
    def ess(self):
        return ess(self.log_w)


def penkf_step_fi(
    model,
    system: SharedSystem,
    z,
    proposal=None,
    taper=None,
    strategy="laplace",
    resample_scheme="systematic",
    ess_threshold=0.5,
    rng=None,
    t=None,
):
    """PEnKF step with one shared ensemble (forecast independence).

    The ensemble is forecast once; each parameter particle is weighted with
    the integrated likelihood from the shared moments.  Each member is then
    updated under a parameter drawn from the new weights, so the ensemble
    represents the state marginal.  The parameter cloud may be larger than
    the ensemble.
    """
    if not model.forecast_independent:
        raise ContractError("penkf_step_fi requires a model flagged forecast-independent")
    t = system.t + 1 if t is None else t
    z = model.obs.check_data(z)
    n, Mx = system.x.shape
    Mt = system.theta.shape[0]
    Xf = model.evolve(system.x, None, t)
    taper_mat = resolve_taper(taper, n)
    prev = SimpleParticles(system.theta, system.log_w)
    thetas, log_corr = _propose(model, prev, proposal, rng, t)
    lls = np.array(
        [
            integrated_loglik(Xf, z, model, th, strategy, taper_mat, t, rng, obs_params=obs_params(model, th)).value
            for th in thetas
        ]
    )
    lw = normalize_log_weights(system.log_w + lls + log_corr, time=t)
    # parameter for each member, drawn from the updated weights
    pick = resample_indices(np.exp(lw), "multinomial", rng, size=Mx)
    P = regularized_cov(Xf, None, None, taper=taper_mat).cov
    Xa = np.empty_like(Xf)
    if model.obs.degenerate:
        Zq = rng.standard_normal((n, Mx))
        Zv = rng.standard_normal((z.size, Mx))
        Xa = _grouped_analysis(Xf, np.repeat(z[:, None], Mx, axis=1), model, [thetas[k] for k in pick], t, P, Zq, Zv)
    else:
        for j, k in enumerate(pick):
            th = thetas[k]
            est = integrated_loglik(Xf, z, model, th, strategy, taper_mat, t, rng, obs_params=obs_params(model, th))
            yj = est.details["laplace"].sample(rng, 1)
            W, V = draw_perturbations(rng, model.Q(th, t), model.R(th, t), 1)
            Xa[:, j : j + 1] = analysis(
                Xf[:, j : j + 1], yj, model.H(th, t), model.R(th, t), model.Q(th, t), None, None, W=W, V=V,
                P=P + model.Q(th, t),
            )[0]
    out = SharedSystem(Xa, thetas, lw, t, system.evolve_calls + 1)
    if out.ess < ess_threshold * Mt:
        idx = resample_indices(out.weights, resample_scheme, rng)
        out = replace(out, theta=thetas[idx], log_w=np.full(Mt, -np.log(Mt)))
    return out, {"t": t, "ess": ess(lw)}


@dataclass
class SimpleParticles:
    theta: np.ndarray
    log_w: np.ndarray

    @property
    def M(self):
        return self.theta.shape[0]


# --------------------------------------------------------------------------
# EARBPF baseline


def _member_loglik(model, Xf, z, theta, t):
    """Per-member log likelihoods with the innovation integrated out, plus Laplace details."""
    H = model.H(theta, t)
    S = H @ model.Q(theta, t) @ H.T + model.R(theta, t)
    Mu = H @ Xf
    if model.obs.degenerate:
        return mvn_logpdf(z, Mu, S, "H Q H' + R"), None, S
    if not model.obs.smooth:
        raise ConfigurationError(f"{model.obs.family} transformation is not supported by the EARBPF")
    lb = laplace_batch(model.obs, z, Mu, S, obs_params(model, theta))
    return lb.values, lb, S


def earbpf_step(
    model,
    system: ParticleSystem,
    z,
    proposal=None,
    resample_scheme="systematic",
    ess_threshold=0.5,
    rng=None,
    t=None,
    liu_west_h=None,
):
    """One step of the particle-filter baseline.

    Each parameter particle weights its forecast members by
    ``int f(z | y) N(y | H x_j, H Q H' + R) dy`` (Laplace per member), scores
    itself with the member average, resamples its members and draws each new
    state from ``[x | x_forecast_j, y_j]`` with ``y_j`` drawn from the member's
    Laplace approximation.
    """
    t = system.t + 1 if t is None else t
    M, n, N = system.ens.shape
    z = model.obs.check_data(z)
    thetas, log_corr = _propose(model, system, proposal, rng, t)
    new_ens = np.empty_like(system.ens)
    lls = np.empty(M)
    member_ess = np.empty(M)
    for i in range(M):
        th = thetas[i]
        Xf = model.evolve(system.ens[i], th, t)
        lwj, lb, S = _member_loglik(model, Xf, z, th, t)
        lls[i] = special.logsumexp(lwj) - np.log(N)
        if not np.isfinite(lls[i]):
            new_ens[i] = Xf
            member_ess[i] = 0.0
            continue
        wj = np.exp(lwj - lwj.max())
        member_ess[i] = wj.sum() ** 2 / np.sum(wj * wj)
        idx = resample_indices(wj, resample_scheme, rng)
        Xr = Xf[:, idx]
        Yj = np.repeat(z[:, None], N, axis=1) if lb is None else replace(
            lb, modes=lb.modes[:, idx], chol_prec=lb.chol_prec[idx]
        ).sample(rng)
        H = model.H(th, t)
        Q = model.Q(th, t)
        R = model.R(th, t)
        if is_zero(Q):
            new_ens[i] = Xr
            continue
        # exact Gaussian conditioning of x on y given the forecast member
        W, V = draw_perturbations(rng, Q, R, N)
        Xp = Xr + W
        K = np.linalg.solve(S, H @ Q).T
        new_ens[i] = Xp + K @ (Yj - H @ Xp - V)
    lw = normalize_log_weights(system.log_w + lls + log_corr, time=t)
    out = ParticleSystem(
        theta=thetas,
        log_w=lw,
        ens=new_ens,
        t=t,
        theta_paths=None if system.theta_paths is None else np.concatenate([system.theta_paths, thetas[None]]),
        state_paths=None if system.state_paths is None else system.state_paths + [new_ens.copy()],
        ancestors=list(system.ancestors),
    )
    out = _maybe_resample(out, ess_threshold, resample_scheme, rng, liu_west_h)
    return out, {"t": t, "ess": ess(lw), "member_ess_mean": float(np.mean(member_ess)), "member_ess": member_ess}
