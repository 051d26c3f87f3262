"""Stochastic ensemble Kalman filter, its nonlinear-observation variant, and the forward EnKS."""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .ensemble import (
    Kind,
    StateEnsemble,
    TaperSpec,
    cross_cov,
    is_zero,
    members_of,
    resolve_taper,
    sample_cov,
    solve_gain,
    sqrt_factor,
    wendland,
    _factor,
)
from .errors import ConfigurationError, DimensionError

INNOVATION = "innovation covariance H Sigma H' + R"


def _as_ensemble(ens, kind, t=0):
    if isinstance(ens, StateEnsemble):
        return ens
    return StateEnsemble(members_of(ens), t, kind)


def draw_perturbations(rng, Q, R, N, Lq=None, Lr=None):
    """Prior perturbations ``W ~ N(0, Q)`` (``None`` when ``Q = 0``) and pseudo-observation noise ``V ~ N(0, R)``.

    Standard normals are drawn for ``W`` first and ``V`` second.
    """
    W = None
    if not is_zero(Q):
        Lq = sqrt_factor(Q) if Lq is None else Lq
        W = Lq @ rng.standard_normal((Lq.shape[1], N))
    Lr = sqrt_factor(R) if Lr is None else Lr
    V = Lr @ rng.standard_normal((Lr.shape[1], N))
    return W, V


def analysis(Xf, y, H, R, Q, taper_mat, rng, W=None, V=None, P=None):
    """Perturbed-observation update of forecast members ``Xf``.

    ``y`` is one observation vector or an ``(m, N)`` matrix with one target per
    member.  ``P`` may pass a precomputed regularized covariance (``Q``
    included); ``W``/``V`` may pass the perturbations.  Returns
    ``(Xa, PHt, B)`` where ``B = S^{-1}(y - ytilde)`` so that
    ``Xa = X + PHt @ B``; EnKS reuses ``B`` for lagged slices.
    """
    Xf = np.asarray(Xf, dtype=float)
    N = Xf.shape[1]
    H = np.atleast_2d(H)
    y = np.asarray(y, dtype=float)
    Y = y[:, None] if y.ndim == 1 else y
    if H.shape != (Y.shape[0], Xf.shape[0]):
        raise DimensionError(f"H has shape {H.shape}; expected {(Y.shape[0], Xf.shape[0])}")
    if P is None:
        P = sample_cov(Xf) * taper_mat
        if not is_zero(Q):
            P = P + Q
    if W is None and V is None:
        W, V = draw_perturbations(rng, Q, R, N)
    X = Xf if W is None else Xf + W
    PHt = P @ H.T
    S = H @ PHt + R
    cf = _factor(S, INNOVATION)
    D = Y - (H @ X + V)
    B = linalg.cho_solve(cf, D, check_finite=False)
    return X + PHt @ B, PHt, B


def enkf_forecast(model, ens, theta=None, rng=None, t=None):
    """Apply the evolution map to every member; innovation noise enters in the update."""
    ens = _as_ensemble(ens, Kind.FILTERING)
    t = ens.time_index + 1 if t is None else t
    X = model.evolve(np.array(ens.members), theta, t)
    return StateEnsemble(X, t, Kind.FORECAST)


def enkf_update(fore, y, model, theta=None, taper: Optional[TaperSpec] = None, rng=None, t=None):
    """Stochastic EnKF update of a forecast ensemble toward observation ``y``."""
    fore = _as_ensemble(fore, Kind.FORECAST)
    t = fore.time_index if t is None else t
    Xf = fore.members
    Xa, _, _ = analysis(
        Xf, y, model.H(theta, t), model.R(theta, t), model.Q(theta, t), resolve_taper(taper, Xf.shape[0]), rng
    )
    return StateEnsemble(Xa, t, Kind.FILTERING)


def enkf_update_nonlinear_obs(
    fore, z, obs_fn, noise_sampler, rng, Q=None, cross_taper=None, obs_taper=None, drop_degenerate=False
):
    """EnKF update with pseudo-observations ``obs_fn(X, V)`` and gain ``C_xy C_yy^{-1}``.

    ``noise_sampler(rng, N)`` returns the ``(m, N)`` noise matrix ``V``.
    ``cross_taper`` (``n x m``) and ``obs_taper`` (``m x m``) localize the two
    sample covariances.  With ``drop_degenerate`` observation coordinates
    whose pseudo-observations do not vary across members get a zero gain
    column instead of raising.
    """
    fore = _as_ensemble(fore, Kind.FORECAST)
    Xf = fore.members
    N = Xf.shape[1]
    X = Xf
    if not is_zero(Q):
        X = Xf + sqrt_factor(Q) @ rng.standard_normal((Xf.shape[0], N))
    V = noise_sampler(rng, N)
    Yt = np.atleast_2d(obs_fn(X, V))
    z = np.asarray(z, dtype=float).reshape(-1)
    Cxy = cross_cov(X, Yt)
    Cyy = sample_cov(Yt)
    if cross_taper is not None:
        Cxy = Cxy * cross_taper
    if obs_taper is not None:
        Cyy = Cyy * obs_taper
    keep = np.ones(z.size, dtype=bool)
    if drop_degenerate:
        keep = np.diag(Cyy) > 1e-12 * max(np.max(np.diag(Cyy)), 1e-300)
    Xa = np.array(X)
    if np.any(keep):
        K = solve_gain(Cxy[:, keep], Cyy[np.ix_(keep, keep)], "pseudo-observation covariance C_yy")
        Xa = X + K @ (z[keep, None] - Yt[keep])
    return StateEnsemble(Xa, fore.time_index, Kind.FILTERING)


# --------------------------------------------------------------------------
# smoother


@dataclass
class EnksResult:
    smoothed: list  # StateEnsemble x_{t|T} (lag-truncated) for t = 1..T
    filtered: list = field(default_factory=list)  # x_{t|t}, when requested
    max_window_scalars: int = 0
    windows: list = field(default_factory=list)  # per-time lists of (l, members), when requested


def lag_weights(k, lags):
    """Wendland factor in lag distance with support radius ``k``."""
    return wendland(np.asarray(lags, dtype=float), float(k))


def initial_ensemble(model, N, rng):
    L = sqrt_factor(model.Sigma0)
    return np.asarray(model.mu0, dtype=float)[:, None] + L @ rng.standard_normal((L.shape[1], N))


def enks_run(
    model,
    y_seq,
    theta_seq=None,
    N=100,
    taper=None,
    k=None,
    rng=None,
    init=None,
    keep_filtered=False,
    keep_windows=False,
    lag_taper=None,
):
    """Forward ensemble Kalman smoother with lag window ``k``.

    ``y_seq[t-1]`` is the observation at time ``t`` (``None`` skips the
    update).  ``theta_seq`` is one parameter per time, or a single parameter
    used throughout.  ``init`` gives the ``(n, N)`` ensemble at time 0;
    otherwise it is drawn from ``N(mu0, Sigma0)``.  Lagged cross-covariances
    are damped by a Wendland factor in lag with radius ``k``; by default only
    when ``taper`` is a Wendland ``TaperSpec``.
    """
    T = len(y_seq)
    k = T if k is None else int(k)
    if k < 1:
        raise ConfigurationError("lag window k must be >= 1")
    thetas = _theta_list(theta_seq, T)
    X = initial_ensemble(model, N, rng) if init is None else np.array(members_of(init), dtype=float)
    n = X.shape[0]
    N = X.shape[1]
    taper_mat = resolve_taper(taper, n)
    if lag_taper is None:
        lag_taper = isinstance(taper, TaperSpec) and taper.family == "wendland"
    window = []  # list of [l, members] with l = t-k+1..t
    smoothed = [None] * T
    filtered = []
    windows = []
    max_scalars = 0
    for t in range(1, T + 1):
        th = thetas[t - 1]
        Xf = model.evolve(X, th, t)
        y = y_seq[t - 1]
        if y is None:
            Xa = Xf
            if not is_zero(model.Q(th, t)):
                Xa = Xf + sqrt_factor(model.Q(th, t)) @ rng.standard_normal((n, N))
            B = None
        else:
            H = model.H(th, t)
            Xa, _, B = analysis(Xf, y, H, model.R(th, t), model.Q(th, t), taper_mat, rng)
        if B is not None and window:
            # lagged cross-covariances with the unperturbed forecast
            Af = Xf - Xf.mean(axis=1, keepdims=True)
            HtB = H.T @ B
            for slot in window:
                l, Xl = slot
                w = lag_weights(k, t - l) if lag_taper else 1.0
                if w == 0.0:
                    continue
                Al = Xl - Xl.mean(axis=1, keepdims=True)
                C = (Al @ Af.T / (N - 1)) * taper_mat * w
                slot[1] = Xl + C @ HtB
        window.append([t, Xa])
        while window and window[0][0] <= t - k:
            l, Xl = window.pop(0)
            smoothed[l - 1] = StateEnsemble(Xl, l, Kind.SMOOTHING)
        max_scalars = max(max_scalars, sum(s[1].size for s in window))
        if keep_filtered:
            filtered.append(StateEnsemble(Xa, t, Kind.FILTERING))
        if keep_windows:
            windows.append([(l, np.array(m)) for l, m in window])
        X = Xa
    for l, Xl in window:
        smoothed[l - 1] = StateEnsemble(Xl, l, Kind.SMOOTHING)
    return EnksResult(smoothed, filtered, max_scalars, windows)


def _theta_list(theta_seq, T):
    if theta_seq is None:
        return [None] * T
    if isinstance(theta_seq, (list, tuple)) and len(theta_seq) == T:
        return list(theta_seq)
    arr = np.asarray(theta_seq, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == T:
        return [arr[t] for t in range(T)]
    return [arr] * T


# --------------------------------------------------------------------------
# state augmentation


def augment_state(model, param_names, noise_sd, base_theta=None, init_mean=None, init_sd=0.0):
    """Append named parameters to the state vector.

    The parameter coordinates are carried through the evolution unchanged and
    receive random-walk noise with standard deviations ``noise_sd`` through the
    innovation covariance.  ``model.evolve`` is called with a ``(p, N)`` matrix
    of per-member parameters when ``model.constants['vectorized_theta']`` is
    set, otherwise member by member.
    """
    names = tuple(param_names)
    if not names:
        return model
    for nm in names:
        if nm not in model.param_names:
            raise ConfigurationError(f"parameter {nm!r} not in model parameters {model.param_names}")
    idx = [model.param_names.index(nm) for nm in names]
    p = len(names)
    n = model.n
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (p,))
    base = np.zeros(model.n_params) if base_theta is None else np.asarray(base_theta, dtype=float)
    vectorized = bool(model.constants.get("vectorized_theta", False))

    def full_theta(par):
        th = np.repeat(base[:, None], par.shape[1], axis=1)
        th[idx] = par
        return th

    def evolve(Xaug, theta, t):
        X, par = Xaug[:n], Xaug[n:]
        th = full_theta(par)
        if vectorized:
            Xn = model.evolve(X, th, t)
        else:
            Xn = np.column_stack([model.evolve(X[:, j : j + 1], th[:, j], t)[:, 0] for j in range(X.shape[1])])
        return np.vstack([Xn, par])

    def H(theta, t):
        Hb = model.H(base, t)
        return np.hstack([Hb, np.zeros((Hb.shape[0], p))])

    def Q(theta, t):
        Qa = np.zeros((n + p, n + p))
        Qa[:n, :n] = model.Q(base, t)
        Qa[n:, n:] = np.diag(sd**2)
        return Qa

    m0 = base[idx] if init_mean is None else np.broadcast_to(np.asarray(init_mean, dtype=float), (p,))
    mu0 = np.concatenate([model.mu0, m0])
    S0 = np.zeros((n + p, n + p))
    S0[:n, :n] = model.Sigma0
    S0[n:, n:] = np.diag(np.broadcast_to(np.asarray(init_sd, dtype=float) ** 2, (p,)))
    return replace(
        model,
        n=n + p,
        evolve=evolve,
        obs_matrix=H,
        obs_cov=lambda theta, t: model.R(base, t),
        innov_cov=Q,
        mu0=mu0,
        Sigma0=S0,
        linear_evolution=None,
        name=model.name + "+aug",
        constants={**model.constants, "augmented": names, "base_n": n},
    )


def augmented_taper(taper_mat, p):
    """Extend an ``n x n`` taper with untapered rows/columns for ``p`` parameters."""
    n = taper_mat.shape[0]
    T = np.ones((n + p, n + p))
    T[:n, :n] = taper_mat
    return T
