"""Smoothers for unknown parameters: Gibbs, Metropolis-Hastings and particle variants around the EnKS.

All chains store one parameter sequence ``theta_{1:T}`` per iteration (a
static parameter is repeated across time) together with one state trajectory
``x_{1:T}`` and latent observations ``y_{1:T}``.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .enkf import enks_run, initial_ensemble
from .ensemble import _factor, is_zero, resolve_taper, sqrt_factor
from .errors import ConfigurationError, HssmError
from .extended_filters import (
    _state_update,
    default_theta_fcd,
    init_particle_system,
    penkf_step,
    resample_indices,
)
from .likelihood import integrated_loglik, laplace_batch, mvn_logpdf
from .model import IndependentDraw, obs_params

log = logging.getLogger(__name__)


@dataclass
class SmootherDraws:
    """Chain output of a smoother.

    ``theta`` is ``(iters, T, p)``, ``x`` is ``(iters, T, n)`` and ``y`` a list
    of per-iteration lists of latent observations.  Draws before ``burn_in``
    are kept for diagnostics; ``kept()`` drops them.
    """

    theta: np.ndarray
    x: np.ndarray
    y: list
    log_post: np.ndarray
    burn_in: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.theta.shape[0] < self.burn_in:
            raise ConfigurationError("chain shorter than its burn-in")

    @property
    def iters(self):
        return self.theta.shape[0]

    def kept(self):
        b = self.burn_in
        return self.theta[b:], self.x[b:]

    def theta_mean(self):
        return self.theta[self.burn_in :].mean(axis=0)

    def x_mean(self):
        return self.x[self.burn_in :].mean(axis=0)


def _write_record(sink, it, theta, x, lp):
    if sink is None:
        return
    sink.write(json.dumps({"iter": it, "theta": theta.tolist(), "x": x.tolist(), "log_post": float(lp)}) + "\n")


def _initial_theta_seq(model, T, rng, theta_init=None):
    p = model.n_params
    if p == 0:
        return np.zeros((T, 0))
    if theta_init is not None:
        th = np.asarray(theta_init, dtype=float)
        if th.ndim <= 1:
            return np.tile(np.atleast_1d(th), (T, 1))
        return th.copy()
    seq = np.empty((T, p))
    prev = model.param_init.sample(rng, 1)
    for t in range(T):
        prev = model.param_transition.sample(prev, rng, t + 1)
        seq[t] = prev[0]
    return seq


def _theta_arg(theta_seq, t):
    return theta_seq[t - 1] if theta_seq.shape[1] else None


def _draw_y_seq(model, z_seq, x_traj, theta_seq, rng, y_cur=None):
    out = []
    for t, z in enumerate(z_seq, start=1):
        if z is None:
            out.append(None)
            continue
        th = _theta_arg(theta_seq, t)
        if model.obs.degenerate:
            out.append(np.asarray(z, dtype=float))
            continue
        hx = model.H(th, t) @ x_traj[t - 1]
        var = np.diag(model.R(th, t))
        cur = None if y_cur is None else y_cur[t - 1]
        out.append(model.obs.sample_y(z, hx, var, rng, y_current=cur, **obs_params(model, th)))
    return out


def _log_post_proxy(model, y_seq, x_traj, theta_seq):
    """Gaussian log density of the latent observations given the state path."""
    total = 0.0
    for t, y in enumerate(y_seq, start=1):
        if y is None:
            continue
        th = _theta_arg(theta_seq, t)
        total += float(mvn_logpdf(y, model.H(th, t) @ x_traj[t - 1], model.R(th, t)))
    return total


def _prior_path(model, theta_seq, rng):
    """Forward simulation of the state mean path, used to seed ``y`` before the first sweep."""
    x = np.asarray(model.mu0, dtype=float)[:, None]
    out = []
    for t in range(1, theta_seq.shape[0] + 1):
        x = model.evolve(x, _theta_arg(theta_seq, t), t)
        out.append(x[:, 0].copy())
    return np.array(out)


# --------------------------------------------------------------------------
# parameter full conditionals over a whole path


def lorenz_theta_conditional(x_traj, Q, prior_mean, prior_sd, base_evolution):
    """Mean and variance of ``theta | x_{1:T}`` when ``x_t = theta L(x_{t-1}) + w_t``, ``w_t ~ N(0, Q)``.

    Sums run over ``t = 2..T`` with ``xtilde_t = L(x_{t-1})``; with ``T = 1``
    the prior is returned.
    """
    X = np.asarray(x_traj, dtype=float)
    prec = 1.0 / prior_sd**2
    lin = prior_mean / prior_sd**2
    if X.shape[0] >= 2:
        cf = _factor(np.atleast_2d(Q), "innovation covariance Q")
        Xt = base_evolution(X[:-1].T)  # columns are xtilde_2..xtilde_T
        QiXt = linalg.cho_solve(cf, Xt, check_finite=False)
        prec += float(np.sum(Xt * QiXt))
        lin += float(np.sum(X[1:].T * QiXt))
    return lin / prec, 1.0 / prec


def lorenz_theta_fcd(x_traj, Q, prior_mean, prior_sd, rng, base_evolution):
    """One exact draw of the Lorenz scaling parameter from its full conditional."""
    mean, var = lorenz_theta_conditional(x_traj, Q, prior_mean, prior_sd, base_evolution)
    return mean + np.sqrt(var) * rng.standard_normal()


def default_path_theta_fcd(model):
    """Full-conditional draw of ``theta_{1:T}`` given ``(z, y, x)`` paths for a built-in model.

    The callable signature is ``fcd(rng, z_seq, y_seq, x_traj, theta_seq) -> theta_seq``.
    """
    if model.name == "lorenz96":
        c = model.constants
        Q = model.Q(None, 2)
        L = c["base_evolution"]

        def fcd(rng, z_seq, y_seq, x_traj, theta_seq):
            th = lorenz_theta_fcd(x_traj, Q, c["prior_mean"], c["prior_sd"], rng, L)
            return np.full_like(theta_seq, th)

        return fcd
    if isinstance(model.param_transition, IndependentDraw):
        step_fcd, _ = default_theta_fcd(model)

        def fcd(rng, z_seq, y_seq, x_traj, theta_seq):
            out = np.array(theta_seq, dtype=float)
            for t in range(1, len(z_seq) + 1):
                out[t - 1] = step_fcd(rng, z_seq[t - 1], y_seq[t - 1], x_traj[t - 1], theta_seq[t - 1], None, t)
            return out

        return fcd
    raise ConfigurationError(f"no path full conditional for the parameters of model {model.name!r}")


# --------------------------------------------------------------------------
# shared Gibbs machinery


def _gibbs_chain(model, z_seq, N, iters, burn_in, rng, theta_update, taper, k, lag_taper, theta_init, sink, record):
    """Iterate (a) EnKS + uniform member pick, (b) ``y`` draws, (c) ``theta_update``."""
    T = len(z_seq)
    theta_seq = _initial_theta_seq(model, T, rng, theta_init)
    y_seq = _draw_y_seq(model, z_seq, _prior_path(model, theta_seq, rng), theta_seq, rng)
    thetas = np.empty((iters, T, theta_seq.shape[1]))
    xs = np.empty((iters, T, model.n))
    ys = []
    lps = np.empty(iters)
    picks = np.empty(iters, dtype=int)
    for it in range(iters):
        th_arg = [_theta_arg(theta_seq, t) for t in range(1, T + 1)]
        res = enks_run(model, y_seq, th_arg, N=N, taper=taper, k=k, rng=rng, lag_taper=lag_taper)
        j = int(rng.integers(N))
        picks[it] = j
        x_traj = np.array([res.smoothed[t].members[:, j] for t in range(T)])
        y_seq = _draw_y_seq(model, z_seq, x_traj, theta_seq, rng, y_cur=y_seq)
        theta_seq = theta_update(rng, z_seq, y_seq, x_traj, theta_seq)
        thetas[it] = theta_seq
        xs[it] = x_traj
        ys.append(y_seq)
        lps[it] = _log_post_proxy(model, y_seq, x_traj, theta_seq)
        if it >= burn_in:
            _write_record(sink, it, theta_seq, x_traj, lps[it])
    diag = {"member_picks": picks}
    diag.update(record)
    return SmootherDraws(thetas, xs, ys, lps, burn_in, diag)


def genks_run(
    model,
    z_seq,
    N,
    iters,
    burn_in=0,
    taper=None,
    k=None,
    rng=None,
    theta_fcd=None,
    theta_init=None,
    lag_taper=None,
    sink=None,
):
    """Gibbs ensemble Kalman smoother.

    Each iteration runs the EnKS given the current ``(theta_{1:T}, y_{1:T})``,
    keeps the trajectory of one uniformly chosen member, redraws ``y_t`` from
    its full conditional and then ``theta_{1:T}`` from ``theta_fcd`` (the
    built-in conditional when omitted).  ``k`` is the lag window and ``taper``
    the spatial taper; the lag taper follows ``enks_run``.
    """
    if model.n_params and theta_fcd is None:
        theta_fcd = default_path_theta_fcd(model)
    update = theta_fcd if model.n_params else (lambda rng, z, y, x, th: th)
    return _gibbs_chain(model, z_seq, N, iters, burn_in, rng, update, taper, k, lag_taper, theta_init, sink, {})


# --------------------------------------------------------------------------
# MHEnKS


def enkf_path_loglik(model, z_seq, theta_seq, N, rng, taper=None, strategy="laplace"):
    """Sum over time of integrated EnKF log likelihoods from one filter pass."""
    T = len(z_seq)
    X = initial_ensemble(model, N, rng)
    taper_mat = resolve_taper(taper, model.n)
    total = 0.0
    for t in range(1, T + 1):
        th = theta_seq[t - 1] if theta_seq is not None else None
        Xf = model.evolve(X, th, t)
        z = z_seq[t - 1]
        if z is None:
            X = Xf if is_zero(model.Q(th, t)) else Xf + sqrt_factor(model.Q(th, t)) @ rng.standard_normal(Xf.shape)
            continue
        est = integrated_loglik(Xf, z, model, th, strategy, taper_mat, t, rng, obs_params=obs_params(model, th))
        total += est.value
        X = _state_update(model, Xf, model.obs.check_data(z), th, t, taper_mat, rng, est.details.get("laplace"))
    return total


class GaussianWalk:
    """Symmetric Gaussian random-walk proposal."""

    def __init__(self, sd):
        self.sd = np.atleast_1d(np.asarray(sd, dtype=float))

    def sample(self, theta, rng):
        return theta + self.sd * rng.standard_normal(theta.shape)

    def log_ratio(self, new, old):
        return 0.0


def mhenks_run(
    model,
    z_seq,
    N,
    proposal,
    iters,
    burn_in=0,
    seed=0,
    theta_init=None,
    log_prior=None,
    taper=None,
    strategy="laplace",
    n_state_draws=0,
    state_iters=1,
    loglik_offset=0.0,
):
    """Metropolis-Hastings over a static parameter with the EnKF likelihood.

    At iteration ``i`` both the current and the proposed parameter are scored
    by a fresh EnKF pass driven by the same random stream (common random
    numbers keyed by ``(seed, i)``).  ``proposal`` is a ``GaussianWalk`` (or a
    standard deviation) or any object with ``sample(theta, rng)`` and
    ``log_ratio(new, old) = log q(old | new) - log q(new | old)``.  After the
    chain, ``n_state_draws`` thinned parameter values each get a state path
    from a fixed-parameter GEnKS of ``state_iters`` iterations.
    ``loglik_offset`` is added to every log likelihood (instrumentation).
    """
    from .rng import stream

    if not isinstance(proposal, GaussianWalk) and not hasattr(proposal, "sample"):
        proposal = GaussianWalk(proposal)
    if log_prior is None:
        log_prior = (lambda th: float(model.param_init.logpdf(th)[0])) if model.param_init is not None else (lambda th: 0.0)
    T = len(z_seq)
    rng0 = stream(seed, "mhenks-init")
    if theta_init is None:
        theta = model.param_init.sample(rng0, 1)[0]
    else:
        theta = np.atleast_1d(np.asarray(theta_init, dtype=float))

    def target(th, it):
        lp = log_prior(th)
        if not np.isfinite(lp):
            return -np.inf
        try:
            ll = enkf_path_loglik(model, z_seq, [th] * T, N, stream(seed, "mhenks-crn", it), taper, strategy)
        except HssmError as exc:
            log.info("likelihood failed at theta=%s: %s", th, exc)
            return -np.inf
        return ll + loglik_offset + lp

    chain = np.empty((iters, theta.size))
    log_ratios = np.empty(iters)
    accepted = 0
    rejected_nonfinite = 0
    for it in range(iters):
        prop_rng = stream(seed, "mhenks-proposal", it)
        cand = proposal.sample(theta, prop_rng)
        cur_val = target(theta, it)
        new_val = target(cand, it)
        lr = new_val - cur_val + proposal.log_ratio(cand, theta)
        log_ratios[it] = lr
        if not np.isfinite(lr):
            if not (new_val == -np.inf and np.isfinite(cur_val)):
                rejected_nonfinite += 1
                log.info("non-finite acceptance ratio at iteration %d; rejected", it)
        elif np.log(prop_rng.random()) < lr:
            theta = cand
            accepted += 1
        chain[it] = theta
    diag = {
        "acceptance_rate": accepted / iters,
        "rejected_nonfinite": rejected_nonfinite,
        "log_ratios": log_ratios,
    }
    xs = np.empty((0, T, model.n))
    ys = []
    lps = np.full(iters, np.nan)
    if n_state_draws:
        kept = chain[burn_in:]
        sel = np.linspace(0, kept.shape[0] - 1, n_state_draws).round().astype(int)
        paths = []
        for r, i in enumerate(sel):
            th = kept[i]
            d = genks_run(
                model,
                z_seq,
                N,
                state_iters,
                0,
                taper,
                rng=stream(seed, "mhenks-states", r),
                theta_fcd=lambda rng, z, y, x, ts: ts,
                theta_init=th,
            )
            paths.append(d.x[-1])
            ys.append(d.y[-1])
        xs = np.array(paths)
        diag["state_draw_index"] = burn_in + sel
    thetas = np.repeat(chain[:, None, :], T, axis=1)
    out = SmootherDraws(thetas, np.empty((iters, T, model.n)) * np.nan, ys, lps, burn_in, diag)
    out.diagnostics["state_draws"] = xs
    return out


# --------------------------------------------------------------------------
# PEnKS


@dataclass
class PenksResult:
    theta_paths: np.ndarray  # (T + 1, M, p)
    log_w: np.ndarray  # final normalized log weights
    states: list  # per time (M, n, N) smoothed ensembles along each particle's genealogy
    origin: np.ndarray  # index at t = 1 of each final particle's ancestor
    unique_origins: list  # unique t = 1 ancestors after each step
    diagnostics: list

    @property
    def weights(self):
        return np.exp(self.log_w)

    def theta_mean(self):
        """Weighted smoothing mean of ``theta_t`` for ``t = 0..T``."""
        return np.einsum("m,tmp->tp", self.weights, self.theta_paths)


def penks_run(
    model, z_seq, M, N, rng, proposal=None, taper=None, strategy="laplace", refresh=False, k=None, **step_kw
):
    """Particle ensemble Kalman smoother: PEnKF with trajectory storage.

    Parameter paths and per-time ensembles follow the resampling genealogy,
    so the final weights are the trajectory weights.  With ``refresh`` the
    state ensembles of each surviving particle are redrawn by an EnKS given
    its parameter path.
    """
    T = len(z_seq)
    if T > 50:
        log.warning("PEnKS with T=%d: path degeneracy is expected for long series", T)
    system = init_particle_system(model, M, N, rng, store_paths=True, store_states=True)
    origin = None
    uniq = []
    diags = []
    for t, z in enumerate(z_seq, start=1):
        n_anc = len(system.ancestors)
        system, d = penkf_step(model, system, z, proposal, taper, strategy, rng=rng, t=t, **step_kw)
        if origin is None:
            origin = np.arange(M)
            if len(system.ancestors) > n_anc:
                origin = origin[system.ancestors[-1]]
        elif len(system.ancestors) > n_anc:
            origin = origin[system.ancestors[-1]]
        uniq.append(int(np.unique(origin).size))
        diags.append(d)
    states = system.state_paths
    if refresh:
        states = [s.copy() for s in states]
        for i in np.unique(np.arange(M)):
            th_path = [system.theta_paths[t, i] for t in range(1, T + 1)]
            res = enks_run(model, z_seq, th_path, N=N, taper=taper, k=k, rng=rng)
            for t in range(T):
                states[t][i] = res.smoothed[t].members
    return PenksResult(system.theta_paths, system.log_w, states, origin, uniq, diags)


# --------------------------------------------------------------------------
# particle Gibbs


def _obs_loglik_members(model, z, X, theta, t):
    H = model.H(theta, t)
    R = model.R(theta, t)
    if model.obs.degenerate:
        return mvn_logpdf(np.asarray(z, dtype=float), H @ X, R, "R")
    if not model.obs.smooth:
        raise ConfigurationError(f"{model.obs.family} transformation is not supported by particle Gibbs")
    return laplace_batch(model.obs, model.obs.check_data(z), H @ X, R, obs_params(model, theta)).values


def conditional_smc(model, z_seq, theta_seq, N, rng, reference=None):
    """Bootstrap particle filter keeping ``reference`` as particle 0; returns one sampled path.

    Without ``reference`` this is an ordinary bootstrap filter with
    multinomial resampling.  Also returns the number of distinct ``t = 1``
    ancestors among the final particles.
    """
    T = len(z_seq)
    n = model.n
    X = initial_ensemble(model, N, rng)
    paths = np.empty((T, n, N))
    anc = np.empty((T, N), dtype=int)
    lw = np.zeros(N)
    for t in range(1, T + 1):
        th = _theta_arg(theta_seq, t)
        if t == 1:
            a = np.arange(N)
        else:
            w = np.exp(lw - lw.max())
            a = rng.choice(N, size=N, p=w / w.sum())
            if reference is not None:
                a[0] = 0
        Xf = model.evolve(X[:, a], th, t)
        Q = model.Q(th, t)
        if not is_zero(Q):
            Xf = Xf + sqrt_factor(Q) @ rng.standard_normal((Q.shape[0], N))
        if reference is not None:
            Xf[:, 0] = reference[t - 1]
        anc[t - 1] = a
        paths[t - 1] = Xf
        X = Xf
        z = z_seq[t - 1]
        lw = np.zeros(N) if z is None else _obs_loglik_members(model, z, X, th, t)
        if not np.any(np.isfinite(lw)):
            lw = np.zeros(N)
    w = np.exp(lw - lw.max())
    b = int(rng.choice(N, p=w / w.sum()))
    traj = np.empty((T, n))
    idx = np.arange(N)
    for t in range(T, 0, -1):
        traj[t - 1] = paths[t - 1][:, b]
        b = anc[t - 1][b]
        idx = anc[t - 1][idx]
    if reference is not None and not np.allclose(paths[:, :, 0], np.asarray(reference).reshape(T, n)):
        raise AssertionError("conditional SMC lost its reference trajectory")
    return traj, int(np.unique(idx).size), paths


def particle_gibbs_run(
    model, z_seq, N, iters, burn_in=0, rng=None, theta_fcd=None, theta_init=None, sink=None
):
    """Particle Gibbs: conditional SMC for the state path alternating with exact parameter draws."""
    T = len(z_seq)
    if model.n_params and theta_fcd is None:
        theta_fcd = default_path_theta_fcd(model)
    theta_seq = _initial_theta_seq(model, T, rng, theta_init)
    ref, _, _ = conditional_smc(model, z_seq, theta_seq, N, rng)
    thetas = np.empty((iters, T, theta_seq.shape[1]))
    xs = np.empty((iters, T, model.n))
    ys = []
    lps = np.empty(iters)
    unique_t1 = np.empty(iters, dtype=int)
    for it in range(iters):
        ref, unique_t1[it], _ = conditional_smc(model, z_seq, theta_seq, N, rng, reference=ref)
        y_seq = _draw_y_seq(model, z_seq, ref, theta_seq, rng)
        if model.n_params:
            theta_seq = theta_fcd(rng, z_seq, y_seq, ref, theta_seq)
        thetas[it] = theta_seq
        xs[it] = ref
        ys.append(y_seq)
        lps[it] = _log_post_proxy(model, y_seq, ref, theta_seq)
        if it >= burn_in:
            _write_record(sink, it, theta_seq, ref, lps[it])
    return SmootherDraws(thetas, xs, ys, lps, burn_in, {"unique_t1": unique_t1})


# --------------------------------------------------------------------------
# block composition


BLOCK_KINDS = ("gibbs_fcd", "mh", "particle")


def _check_blocks(model, blocks):
    seen = []
    for b in blocks:
        if b.get("kind") not in BLOCK_KINDS:
            raise ConfigurationError(f"block kind must be one of {BLOCK_KINDS}, got {b.get('kind')!r}")
        for nm in b["params"]:
            if nm not in model.param_names:
                raise ConfigurationError(f"unknown parameter {nm!r}")
            if nm in seen:
                raise ConfigurationError(f"parameter {nm!r} appears in more than one block")
            seen.append(nm)
    if sorted(seen) != sorted(model.param_names):
        raise ConfigurationError("blocks must partition the model parameters")


def mcmc_enks_compose(
    model,
    z_seq,
    blocks,
    N,
    iters,
    burn_in=0,
    rng=None,
    taper=None,
    k=None,
    lag_taper=None,
    theta_init=None,
    loglik_N=None,
    sink=None,
):
    """MCMC-EnKS: sweep parameter blocks, then redraw the state by the EnKS.

    Each block is a dict with ``params`` (names) and ``kind``:

    ``gibbs_fcd``
        ``fcd(rng, z_seq, y_seq, x_traj, theta_seq) -> theta_seq``; only the
        block's columns are taken from the result.
    ``mh``
        random-walk Metropolis on a static block with standard deviation
        ``proposal_sd``; the target is the EnKF likelihood (``loglik_N``
        members, same random stream for both values) times ``log_prior``.
    ``particle``
        conditional importance resampling: ``n_candidates`` prior draws plus
        the current value, weighted by the EnKF likelihood.
    """
    _check_blocks(model, blocks)
    loglik_N = N if loglik_N is None else loglik_N
    cols = [[model.param_names.index(nm) for nm in b["params"]] for b in blocks]
    stats = [{"accepted": 0, "proposed": 0} for _ in blocks]

    def lik(theta_seq, seed):
        r = np.random.default_rng(seed)
        try:
            return enkf_path_loglik(model, z_seq, list(theta_seq), loglik_N, r, taper)
        except HssmError:
            return -np.inf

    def update(rng, z, y, x, theta_seq):
        th = np.array(theta_seq, dtype=float)
        for b, c, st in zip(blocks, cols, stats):
            kind = b["kind"]
            if kind == "gibbs_fcd":
                th[:, c] = np.asarray(b["fcd"](rng, z, y, x, th))[:, c]
                continue
            lp = b.get("log_prior", lambda v: 0.0)
            seed = int(rng.integers(2**63))
            if kind == "mh":
                cand = th.copy()
                cand[:, c] = th[0, c] + np.asarray(b["proposal_sd"]) * rng.standard_normal(len(c))
                cur = lik(th, seed) + lp(th[0, c])
                new = lik(cand, seed) + lp(cand[0, c])
                st["proposed"] += 1
                if np.isfinite(new - cur) and np.log(rng.random()) < new - cur:
                    th = cand
                    st["accepted"] += 1
            else:
                K = int(b.get("n_candidates", 10))
                draws = b["sampler"](rng, K)
                cands = [th] + [_with_cols(th, c, d) for d in draws]
                lw = np.array([lik(cd, seed) for cd in cands])
                if np.any(np.isfinite(lw)):
                    pick = resample_indices(np.exp(lw - special.logsumexp(lw)), "multinomial", rng, size=1)[0]
                    st["accepted"] += int(pick != 0)
                    th = cands[pick]
                st["proposed"] += 1
        return th

    return _gibbs_chain(
        model, z_seq, N, iters, burn_in, rng, update, taper, k, lag_taper, theta_init, sink, {"blocks": stats}
    )


def _with_cols(th, cols, values):
    out = th.copy()
    out[:, cols] = np.atleast_1d(values)
    return out
