"""Likelihood estimators for a single assimilation step.

All values are kept on the log scale.  ``particle_loglik`` averages Gaussian
densities over forecast members, ``enkf_loglik`` plugs the regularized
ensemble moments into one Gaussian density, and ``integrated_loglik``
additionally integrates a non-Gaussian transformation layer out.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .ensemble import _factor, members_of, regularized_cov, resolve_taper
from .errors import ConfigurationError, NumericalError
from .rng import stream

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LogLikEstimate:
    value: float
    estimator: str
    n_eval: int = 0
    details: dict = field(default_factory=dict, compare=False, repr=False)

    def __float__(self):
        return float(self.value)


def mvn_logpdf(y, mean, cov, name="covariance"):
    """Gaussian log density of ``y`` for one mean vector or each column of a mean matrix."""
    y = np.asarray(y, dtype=float).reshape(-1)
    mean = np.asarray(mean, dtype=float)
    cf = _factor(np.atleast_2d(cov), name)
    L = np.tril(cf[0])
    resid = y[:, None] - (mean if mean.ndim == 2 else mean[:, None])
    u = linalg.solve_triangular(L, resid, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (y.size * LOG2PI + logdet + np.sum(u * u, axis=0))
    return out if mean.ndim == 2 else float(out[0])


def particle_loglik(fore, y, H, R, Q=None):
    """``log (1/N) sum_j N(y | H x_j, H Q H' + R)`` via log-sum-exp."""
    X = members_of(fore)
    H = np.atleast_2d(H)
    S = np.atleast_2d(R) if Q is None else H @ np.atleast_2d(Q) @ H.T + np.atleast_2d(R)
    # sorted so the floating-point sum does not depend on member order
    lp = np.sort(mvn_logpdf(y, H @ X, S, "H Q H' + R"))
    N = X.shape[1]
    return LogLikEstimate(float(special.logsumexp(lp) - np.log(N)), "particle", N)


def enkf_loglik(fore, y, H, R, Q=None, taper=None):
    """``log N(y | H mu, H Sigma H' + R)`` with tapered ensemble moments plus ``Q``."""
    X = members_of(fore)
    fc = regularized_cov(X, None, Q, taper=resolve_taper(taper, X.shape[0]))
    H = np.atleast_2d(H)
    S = H @ fc.cov @ H.T + np.atleast_2d(R)
    val = mvn_logpdf(y, H @ fc.mean, S, "H Sigma H' + R")
    return LogLikEstimate(val, "enkf", X.shape[1])


def exact_gaussian_loglik(y, mean, cov):
    return LogLikEstimate(mvn_logpdf(y, mean, cov), "exact", 0)


# --------------------------------------------------------------------------
# Laplace integration


@dataclass(frozen=True)
class LaplaceResult:
    value: float
    mode: np.ndarray
    precision: np.ndarray  # negative Hessian at the mode (diagonal vector in the diagonal case)
    log_integrand: float
    log_det_term: float
    iterations: int
    diagonal: bool

    def cov(self):
        if self.diagonal:
            return np.diag(1.0 / self.precision)
        return np.linalg.inv(self.precision)

    def sample(self, rng, size):
        """``size`` draws from the Gaussian approximation as columns."""
        m = self.mode.size
        Z = rng.standard_normal((m, size))
        if self.diagonal:
            return self.mode[:, None] + Z / np.sqrt(self.precision)[:, None]
        L = np.linalg.cholesky(self.precision)
        return self.mode[:, None] + linalg.solve_triangular(L.T, Z, lower=False)


def laplace_integrate(log_f, mu, Sigma, max_iter=100, tol=1e-8):
    """Laplace approximation of ``log int f(y) N(y | mu, Sigma) dy``.

    ``log_f(y)`` returns ``(value, gradient, hessian_diagonal)`` of a
    coordinate-wise separable log density.  Newton ascent starts at ``mu`` and
    halves steps until the objective increases.  The result is the log
    integrand at the mode plus ``0.5 log det(2 pi Sigma*)``, where
    ``Sigma*`` is the inverse negative Hessian.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    m = mu.size
    diagonal = not np.any(Sigma - np.diag(np.diag(Sigma)))
    if diagonal:
        var = np.diag(Sigma).copy()
        if np.any(var <= 0):
            raise ConfigurationError("Gaussian term must have positive variances")
        prec0 = 1.0 / var
        log_norm = -0.5 * (m * LOG2PI + np.sum(np.log(var)))

        def gauss(y):
            r = y - mu
            return log_norm - 0.5 * np.sum(prec0 * r * r), -prec0 * r

    else:
        cf = _factor(Sigma, "Gaussian term covariance")
        L = np.tril(cf[0])
        log_norm = -0.5 * (m * LOG2PI) - np.sum(np.log(np.diag(L)))
        P0 = linalg.cho_solve(cf, np.eye(m), check_finite=False)
        P0 = 0.5 * (P0 + P0.T)

        def gauss(y):
            r = y - mu
            g = -(P0 @ r)
            return log_norm + 0.5 * float(r @ g), g

    def objective(y):
        fv, fg, fh = log_f(y)
        gv, gg = gauss(y)
        return fv + gv, fg + gg, fh

    y = mu.copy()
    val, grad, hdiag = objective(y)
    trace = []
    for it in range(max_iter + 1):
        gnorm = float(np.linalg.norm(grad))
        trace.append(gnorm)
        if gnorm < tol * (1.0 + np.sqrt(m)) or not np.isfinite(gnorm):
            break
        if it == max_iter:
            raise NumericalError("Laplace mode search did not converge", trace)
        if diagonal:
            prec = prec0 - hdiag
            step = grad / prec
        else:
            prec = P0 - np.diag(hdiag)
            step = linalg.solve(prec, grad, assume_a="pos", check_finite=False)
        # Newton decrement at roundoff level: the gradient cannot shrink further
        if float(grad @ step) <= 1e-14 * (1.0 + abs(val)):
            break
        s = 1.0
        for _ in range(60):
            cand = y + s * step
            cv, cg, ch = objective(cand)
            # rounding slack: near the mode a full step can look like a tiny loss
            if np.isfinite(cv) and cv >= val - 1e-13 * (1.0 + abs(val)):
                break
            s *= 0.5
        else:
            # no ascent possible at machine precision
            break
        if cv - val <= 1e-15 * max(1.0, abs(val)) and s < 1.0:
            y, val, grad, hdiag = cand, cv, cg, ch
            break
        y, val, grad, hdiag = cand, cv, cg, ch
    if not np.isfinite(val):
        raise NumericalError("Laplace objective is not finite at the mode", trace)
    if diagonal:
        prec = prec0 - hdiag
        logdet_prec = float(np.sum(np.log(prec)))
    else:
        prec = P0 - np.diag(hdiag)
        prec = 0.5 * (prec + prec.T)
        logdet_prec = 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(prec)))))
    log_det_term = 0.5 * (m * LOG2PI - logdet_prec)
    return LaplaceResult(val + log_det_term, y, prec, val, log_det_term, len(trace), diagonal)


def _obs_log_f(obs, z, params):
    z = np.asarray(z, dtype=float)

    def log_f(y):
        v = obs.log_f(z, y, **params)
        g, h = obs.log_f_derivs(z, y, **params)
        return float(np.sum(v)), g, h

    return log_f


def y_gaussian_term(fore, model, theta, t=1, taper=None):
    """Mean and covariance of ``y_t`` implied by the ensemble: ``(H mu, H Sigma H' + R)``."""
    X = members_of(fore)
    Q = model.Q(theta, t)
    fc = regularized_cov(X, None, Q, taper=resolve_taper(taper, X.shape[0]))
    H = model.H(theta, t)
    return H @ fc.mean, H @ fc.cov @ H.T + model.R(theta, t), fc


def integrated_loglik(fore, z, model, theta, strategy="laplace", taper=None, t=1, rng=None, n_mc=200, obs_params=None):
    """Likelihood of data ``z`` with the latent ``y`` integrated against the EnKF Gaussian.

    ``strategy`` is ``degenerate`` (``z = y``), ``laplace`` or
    ``monte_carlo`` (importance sampling from the Laplace Gaussian).
    """
    params = {} if obs_params is None else obs_params
    X = members_of(fore)
    if strategy == "degenerate" or model.obs.degenerate:
        if strategy not in ("degenerate", "laplace"):
            raise ConfigurationError(f"strategy {strategy!r} needs a non-degenerate transformation")
        est = enkf_loglik(X, z, model.H(theta, t), model.R(theta, t), model.Q(theta, t), taper)
        return LogLikEstimate(est.value, "enkf", X.shape[1])
    if not model.obs.smooth:
        raise ConfigurationError(f"{model.obs.family} transformation cannot be integrated by {strategy}")
    mean, cov, _ = y_gaussian_term(X, model, theta, t, taper)
    lap = laplace_integrate(_obs_log_f(model.obs, z, params), mean, cov)
    if strategy == "laplace":
        return LogLikEstimate(lap.value, "integrated_laplace", X.shape[1], {"laplace": lap})
    if strategy != "monte_carlo":
        raise ConfigurationError(f"unknown integration strategy {strategy!r}")
    if rng is None:
        raise ConfigurationError("monte_carlo strategy needs an rng")
    Y = lap.sample(rng, n_mc)
    zz = np.asarray(z, dtype=float)
    log_fz = np.sum(model.obs.log_f(zz[:, None], Y, **params), axis=0)
    log_prior = mvn_logpdf(np.zeros(mean.size), mean[:, None] - Y, cov)
    log_q = mvn_logpdf(np.zeros(mean.size), lap.mode[:, None] - Y, lap.cov())
    lw = log_fz + log_prior - log_q
    return LogLikEstimate(float(special.logsumexp(lw) - np.log(n_mc)), "integrated_mc", X.shape[1], {"laplace": lap})


# --------------------------------------------------------------------------
# variance study on the independent Gaussian example


def _particle_draws_suffstat(y, N, reps, kappa, theta, rng):
    n = y.size
    lam = float(y @ y) / kappa
    out = np.empty(reps)
    c = -0.5 * n * np.log(2.0 * np.pi * theta)
    for r in range(reps):
        d2 = kappa * rng.noncentral_chisquare(n, lam, size=N) if lam > 0 else kappa * rng.chisquare(n, size=N)
        out[r] = special.logsumexp(c - d2 / (2.0 * theta)) - np.log(N)
    return out


def _enkf_draws_suffstat(y, N, reps, kappa, theta, rng):
    n = y.size
    mu = rng.standard_normal((reps, n)) * np.sqrt(kappa / N)
    s2 = kappa * rng.chisquare(N - 1, size=(reps, n)) / (N - 1)
    v = s2 + theta
    return np.sum(-0.5 * (LOG2PI + np.log(v) + (y - mu) ** 2 / v), axis=1)


def _draws_ensemble(estimator, y, N, reps, kappa, theta, rng):
    n = y.size
    H = np.eye(n)
    R = theta * np.eye(n)
    taper = np.eye(n)
    out = np.empty(reps)
    for r in range(reps):
        X = np.sqrt(kappa) * rng.standard_normal((n, N))
        if estimator == "particle":
            out[r] = particle_loglik(X, y, H, R).value
        else:
            out[r] = enkf_loglik(X, y, H, R, None, taper).value
    return out


def loglik_draws(estimator, y, N, reps, kappa=4.0, theta=1.0, rng=None, method="sufficient"):
    """``reps`` independent log-likelihood estimates at fixed ``y`` with ensemble size ``N``.

    ``method="sufficient"`` samples the estimator through its sufficient
    statistics (noncentral chi-square distances, normal/chi-square moments);
    ``method="ensemble"`` draws full ensembles.
    """
    y = np.asarray(y, dtype=float)
    if estimator not in ("particle", "enkf"):
        raise ConfigurationError(f"unknown estimator {estimator!r}")
    if method == "ensemble":
        return _draws_ensemble(estimator, y, N, reps, kappa, theta, rng)
    if method != "sufficient":
        raise ConfigurationError(f"unknown method {method!r}")
    if estimator == "particle":
        return _particle_draws_suffstat(y, N, reps, kappa, theta, rng)
    return _enkf_draws_suffstat(y, N, reps, kappa, theta, rng)


def mean_loglik_variance(estimator, n, N, replications, y_realizations, kappa, theta, seed, method="sufficient"):
    ys = stream(seed, "variance-study-y", n).standard_normal((y_realizations, n)) * np.sqrt(kappa + theta)
    rng = stream(seed, "variance-study", estimator, n, N)
    v = [np.var(loglik_draws(estimator, y, N, replications, kappa, theta, rng, method), ddof=1) for y in ys]
    return float(np.mean(v))


def minimal_ensemble_size(
    estimator,
    n,
    target_var=2.0,
    N_max=2**20,
    replications=200,
    y_realizations=100,
    kappa=4.0,
    theta=1.0,
    seed=0,
    method="sufficient",
    rel_tol=0.05,
):
    """Smallest ``N`` whose averaged log-likelihood variance is below ``target_var``.

    Doubling search followed by bisection down to a relative bracket width
    ``rel_tol``.  Returns ``(N, censored, variance_at_N)``; when even
    ``N_max`` fails, ``N = N_max`` and ``censored`` is True.
    """
    if replications < 2:
        raise ConfigurationError("need at least 2 replications")
    cache = {}

    def var(N):
        if N not in cache:
            cache[N] = mean_loglik_variance(estimator, n, N, replications, y_realizations, kappa, theta, seed, method)
        return cache[N]

    lo = 1 if estimator == "particle" else 2
    if var(lo) < target_var:
        return lo, False, var(lo)
    hi = lo
    while var(hi) >= target_var:
        if hi >= N_max:
            return N_max, True, var(hi)
        lo = hi
        hi = min(2 * hi, N_max)
    while hi - lo > max(1, int(rel_tol * lo)):
        mid = (lo + hi) // 2
        if var(mid) < target_var:
            hi = mid
        else:
            lo = mid
    return hi, False, var(hi)


def loglik_variance_study(
    n_grid=(1, 2, 4, 8, 16, 32),
    estimators=("enkf", "particle"),
    target_var=2.0,
    N_max=2**20,
    replications=200,
    y_realizations=100,
    kappa=4.0,
    theta=1.0,
    seed=0,
    method="sufficient",
    rel_tol=0.05,
):
    """Minimal ensemble size per ``(n, estimator)`` as a list of row dicts."""
    rows = []
    for n in n_grid:
        for est in estimators:
            N, cens, v = minimal_ensemble_size(
                est, n, target_var, N_max, replications, y_realizations, kappa, theta, seed, method, rel_tol
            )
            rows.append(
                {"n": int(n), "estimator": est, "minimal_N": int(N), "censored_flag": bool(cens), "variance_at_minimal_N": v}
            )
    return rows


def fit_growth(rows, estimator, log_scale):
    """Least-squares line of minimal ``N`` against ``n`` over uncensored rows; returns ``(slope, intercept, r2)``."""
    pts = [(r["n"], r["minimal_N"]) for r in rows if r["estimator"] == estimator and not r["censored_flag"]]
    if len(pts) < 3:
        return np.nan, np.nan, np.nan
    n = np.array([p[0] for p in pts], dtype=float)
    v = np.array([p[1] for p in pts], dtype=float)
    if log_scale:
        v = np.log(v)
    slope, icpt = np.polyfit(n, v, 1)
    resid = v - (slope * n + icpt)
    tot = np.sum((v - v.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / tot if tot > 0 else 1.0
    return float(slope), float(icpt), float(r2)


@dataclass(frozen=True)
class LaplaceBatch:
    values: np.ndarray  # (N,) log integrals
    modes: np.ndarray  # (m, N)
    chol_prec: np.ndarray  # (N, m, m) lower Cholesky factors of the negative Hessians

    def sample(self, rng):
        """One draw per member from its Gaussian approximation, as columns."""
        m, N = self.modes.shape
        Z = rng.standard_normal((N, m, 1))
        U = np.linalg.solve(np.transpose(self.chol_prec, (0, 2, 1)), Z)[..., 0]
        return self.modes + U.T


def laplace_batch(obs, z, Mu, S, params=None, max_iter=100, tol=1e-8):
    """Laplace approximations of ``log int f(z | y) N(y | mu_j, S) dy`` for every column ``mu_j`` of ``Mu``.

    The Gaussian covariance ``S`` is shared; Newton steps are solved in one
    batched call per iteration.
    """
    params = {} if params is None else params
    z = np.asarray(z, dtype=float)
    Mu = np.asarray(Mu, dtype=float)
    m, N = Mu.shape
    cf = _factor(np.atleast_2d(S), "Gaussian term covariance")
    P0 = linalg.cho_solve(cf, np.eye(m), check_finite=False)
    P0 = 0.5 * (P0 + P0.T)
    log_norm = -0.5 * m * LOG2PI - np.sum(np.log(np.diag(cf[0])))
    zc = z[:, None]

    Y = Mu.copy()
    val = _batch_objective(obs, zc, Y, Mu, P0, params)
    diag_idx = np.arange(m)
    stalled = np.zeros(N, dtype=bool)
    trace = []
    for it in range(max_iter + 1):
        g, h = obs.log_f_derivs(zc, Y, **params)
        G = g - P0 @ (Y - Mu)
        gn = np.linalg.norm(G, axis=0)
        trace.append(float(np.max(gn)))
        active = np.flatnonzero((gn >= tol * (1.0 + np.sqrt(m))) & ~stalled)
        if active.size == 0:
            break
        A = np.repeat(P0[None], active.size, axis=0)
        A[:, diag_idx, diag_idx] -= h[:, active].T
        step = np.linalg.solve(A, G[:, active].T[..., None])[..., 0].T
        keep = np.sum(G[:, active] * step, axis=0) > 1e-14 * (1.0 + np.abs(val[active]))
        if not np.any(keep):
            break
        if it == max_iter:
            raise NumericalError("batched Laplace mode search did not converge", trace)
        active, step = active[keep], step[:, keep]
        s = np.ones(active.size)
        base = val[active]
        for _ in range(60):
            cand = Y[:, active] + s * step
            cv = _batch_objective(obs, zc, cand, Mu[:, active], P0, params)
            bad = ~(np.isfinite(cv) & (cv >= base - 1e-13 * (1.0 + np.abs(base))))
            if not np.any(bad):
                break
            s = np.where(bad, 0.5 * s, s)
        moved = ~bad
        cols = active[moved]
        Y[:, cols] = cand[:, moved]
        val[cols] = cv[moved]
        # a damped step that gains nothing means the column sits at the rounding floor
        stalled[active] = bad | ((s < 1.0) & (cv - base <= 1e-15 * np.maximum(1.0, np.abs(base))))
        if not np.any(moved):
            break
    _, h = obs.log_f_derivs(zc, Y, **params)
    A = np.repeat(P0[None], N, axis=0)
    A[:, diag_idx, diag_idx] -= h.T
    L = np.linalg.cholesky(A)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    values = val + log_norm + 0.5 * (m * LOG2PI - logdet)
    return LaplaceBatch(values, Y, L)


def _batch_objective(obs, zc, Y, Mu, P0, params):
    R = Y - Mu
    return np.sum(obs.log_f(zc, Y, **params), axis=0) - 0.5 * np.sum(R * (P0 @ R), axis=0)
