"""Transformation layers ``z | y``: densities, y full conditionals and parameter updates.

Every family factorizes over observation coordinates, so all samplers work
elementwise on length-``m`` vectors.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import DataDomainError, NumericalError, ParameterDomainError

VAR_FLOOR = 1e-6
RAIN_ZERO = 1e-12


def _positive(name, v):
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise ParameterDomainError(f"{name} must be strictly positive")
    return v


# --------------------------------------------------------------------------
# truncated normal


def _upper_tail_rejection(a, rng):
    """Exponential-proposal rejection sampler for N(0,1) restricted to ``[a, inf)``, ``a > 0``."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    todo = np.arange(a.size)
    flat = a.reshape(-1)
    res = out.reshape(-1)
    lam = 0.5 * (flat + np.sqrt(flat**2 + 4.0))
    while todo.size:
        x = flat[todo] + rng.exponential(1.0 / lam[todo])
        ok = rng.random(todo.size) <= np.exp(-0.5 * (x - lam[todo]) ** 2)
        res[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def truncnorm_std(a, b, rng):
    """Standard normal draws truncated to ``[a, b]`` (elementwise, infinite bounds allowed)."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    a = a.copy()
    b = b.copy()
    if np.any(a >= b):
        raise ValueError("truncation interval is empty")
    # mirror intervals lying in the lower half onto the upper half
    flip = b <= 0
    a[flip], b[flip] = -b[flip], -a[flip]
    out = np.empty(a.shape)
    u = rng.random(a.shape)

    upper = a >= 0
    tail = upper & (a > 6.0) & np.isinf(b)
    inv = upper & ~tail
    if np.any(inv):
        sa = special.ndtr(-a[inv])
        sb = special.ndtr(-b[inv])
        out[inv] = -special.ndtri(sa - u[inv] * (sa - sb))
    if np.any(tail):
        out[tail] = _upper_tail_rejection(a[tail], rng)
    mid = ~upper
    if np.any(mid):
        pa = special.ndtr(a[mid])
        pb = special.ndtr(b[mid])
        out[mid] = special.ndtri(pa + u[mid] * (pb - pa))
    out = np.clip(out, a, b)
    out[flip] = -out[flip]
    return out


def truncnorm_draw(mean, sd, lower, upper, rng):
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    z = truncnorm_std((lower - mean) / sd, (upper - mean) / sd, rng)
    return mean + sd * z


# --------------------------------------------------------------------------
# observation families


@dataclass(frozen=True)
class ObsModel:
    """Base class: the identity transformation ``z = y``."""

    family = "identity"
    # True when log f(z|y) is twice differentiable in y (Laplace integration possible)
    smooth = False
    degenerate = True

    def transform(self, y, rng=None, **params):
        return np.asarray(y, dtype=float).copy()

    def check_data(self, z):
        return np.asarray(z, dtype=float)

    def sample_y(self, z, hx, var, rng, y_current=None, **params):
        return np.asarray(z, dtype=float).copy()

    def log_f(self, z, y, **params):
        """Per-coordinate log density; -inf outside the support."""
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.where(z == y, 0.0, -np.inf)

    def log_f_derivs(self, z, y, **params):
        raise NotImplementedError(f"{self.family} transformation is not differentiable in y")


IdentityObs = ObsModel


@dataclass(frozen=True)
class ScaleMixtureT(ObsModel):
    """Identity transformation with observation variances ``sigma_l^2 theta_l``.

    The mixing scales ``theta_l ~ IG(kappa/2, kappa/2)`` make the marginal
    observation error ``sigma_l`` times a Student t with ``kappa`` degrees of freedom.
    """

    kappa: float = 2.0
    sigma: float = 0.2
    family = "scale_mixture_t"

    def __post_init__(self):
        _positive("kappa", self.kappa)
        _positive("sigma", self.sigma)

    def obs_var(self, scales):
        return np.asarray(self.sigma, dtype=float) ** 2 * np.asarray(scales, dtype=float)

    def sample_scales_prior(self, m, rng):
        h = 0.5 * self.kappa
        return stats.invgamma.rvs(h, scale=h, size=m, random_state=rng)

    def sample_scales_fcd(self, y, hx, rng):
        h = 0.5 * self.kappa
        return sample_scale_params_fcd(y, hx, self.sigma, h, h, rng)


@dataclass(frozen=True)
class Probit(ObsModel):
    """Binary observations ``z = 1(y > 0)``."""

    sigma: float = 0.2
    family = "probit"
    degenerate = False

    def transform(self, y, rng=None, **params):
        return (np.asarray(y) > 0).astype(float)

    def check_data(self, z):
        z = np.asarray(z, dtype=float)
        if np.any((z != 0) & (z != 1)):
            raise DataDomainError("probit observations must be 0 or 1")
        return z

    def sample_y(self, z, hx, var, rng, y_current=None, **params):
        z = self.check_data(z)
        hx = np.broadcast_to(np.asarray(hx, dtype=float), z.shape)
        sd = np.sqrt(np.broadcast_to(np.asarray(var, dtype=float), z.shape))
        lo = np.where(z == 1, 0.0, -np.inf)
        hi = np.where(z == 1, np.inf, 0.0)
        y = truncnorm_draw(hx, sd, lo, hi, rng)
        # keep the sign strict even when the draw lands on the boundary
        tiny = np.finfo(float).tiny
        return np.where(z == 1, np.maximum(y, tiny), np.minimum(y, 0.0))

    def log_f(self, z, y, **params):
        z = self.check_data(z)
        return np.where((np.asarray(y) > 0) == (z == 1), 0.0, -np.inf)


def _exact_root(z, k, radius=4):
    """``z**(1/k)`` moved by a few ulps so that raising it back to ``k`` returns ``z`` when possible."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(z > 0, z ** (1.0 / k), 0.0)
        # one Newton step on y**k = z removes most of the pow rounding error
        y = np.where(z > 0, y - (y**k - z) / (k * y ** (k - 1.0)), 0.0)
    best = y.copy()
    err = np.abs(y**k - z)
    lo = hi = y
    for _ in range(radius):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
        for cand in (lo, hi):
            e = np.abs(np.maximum(cand, 0.0) ** k - z)
            better = e < err
            best = np.where(better, cand, best)
            err = np.where(better, e, err)
    return best


@dataclass(frozen=True)
class Rainfall(ObsModel):
    """Censored power transformation ``z = y^kappa 1(y > 0)``."""

    kappa: float = 3.0
    sigma: float = 0.2
    family = "rainfall"
    degenerate = False

    def _kappa(self, kappa):
        k = self.kappa if kappa is None else kappa
        return float(_positive("kappa", k))

    def transform(self, y, rng=None, kappa=None, **params):
        k = self._kappa(kappa)
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.maximum(y, 0.0) ** k, 0.0)

    def check_data(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise DataDomainError("rainfall observations must be nonnegative")
        return np.where(z < RAIN_ZERO, 0.0, z)

    def sample_y(self, z, hx, var, rng, y_current=None, kappa=None, **params):
        z = self.check_data(z)
        k = self._kappa(kappa)
        hx = np.broadcast_to(np.asarray(hx, dtype=float), z.shape)
        sd = np.sqrt(np.broadcast_to(np.asarray(var, dtype=float), z.shape))
        y = np.where(z > 0, _exact_root(z, k), 0.0)
        dry = z == 0
        if np.any(dry):
            y[dry] = np.minimum(truncnorm_draw(hx[dry], sd[dry], -np.inf, 0.0, rng), 0.0)
        return y

    def log_f(self, z, y, kappa=None, **params):
        z = self.check_data(z)
        return np.where(self.transform(y, kappa=kappa) == z, 0.0, -np.inf)


@dataclass(frozen=True)
class PoissonLog(ObsModel):
    """Counts ``z_l ~ Poisson(exp(y_l))``."""

    family = "poisson_log"
    smooth = True
    degenerate = False

    def transform(self, y, rng=None, **params):
        if rng is None:
            raise ValueError("Poisson transformation needs an rng")
        return rng.poisson(np.exp(np.asarray(y, dtype=float))).astype(float)

    def check_data(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < 0) or np.any(z != np.round(z)):
            raise DataDomainError("Poisson observations must be nonnegative integers")
        return z

    def log_f(self, z, y, **params):
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        return z * y - np.exp(y) - special.gammaln(z + 1.0)

    def log_f_derivs(self, z, y, **params):
        e = np.exp(np.asarray(y, dtype=float))
        return np.asarray(z, dtype=float) - e, -e

    def sample_y(self, z, hx, var, rng, y_current=None, **params):
        """Independence Metropolis step with the Laplace Gaussian as proposal.

        Without ``y_current`` the Laplace draw is returned directly.
        """
        z = self.check_data(z)
        hx = np.broadcast_to(np.asarray(hx, dtype=float), z.shape)
        var = np.maximum(np.broadcast_to(np.asarray(var, dtype=float), z.shape), VAR_FLOOR)
        mode, hess = poisson_y_mode_and_curvature(z, hx, var)
        psd = np.sqrt(-1.0 / hess)
        prop = mode + psd * rng.standard_normal(z.shape)
        if y_current is None:
            return prop
        cur = np.asarray(y_current, dtype=float)

        def log_target(y):
            return z * y - np.exp(y) - 0.5 * (y - hx) ** 2 / var

        def log_q(y):
            return -0.5 * ((y - mode) / psd) ** 2

        log_acc = log_target(prop) - log_target(cur) + log_q(cur) - log_q(prop)
        accept = np.log(rng.random(z.shape)) < log_acc
        return np.where(accept, prop, cur)


FAMILIES = {
    "identity": IdentityObs,
    "scale_mixture_t": ScaleMixtureT,
    "probit": Probit,
    "rainfall": Rainfall,
    "poisson_log": PoissonLog,
}


# --------------------------------------------------------------------------
# module-level conditionals


def sample_scale_params_fcd(y, hx, sigma, a, b, rng):
    """Inverse-gamma full conditionals of the per-coordinate mixing scales.

    ``theta_l | y, x ~ IG(a + 1/2, b + r_l^2 / 2)`` with standardized residual
    ``r_l = (y_l - (Hx)_l) / sigma_l``.
    """
    a = float(_positive("a", a))
    b = float(_positive("b", b))
    r = (np.asarray(y, dtype=float) - np.asarray(hx, dtype=float)) / np.asarray(sigma, dtype=float)
    scale = b + 0.5 * r**2
    # IG(shape, scale) = scale / Gamma(shape, 1)
    return scale / rng.gamma(a + 0.5, 1.0, size=r.shape)


def sample_y_fcd(z, hx, obs: ObsModel, var, rng, y_current=None, **params):
    """Draw ``y`` from its full conditional given ``z`` and the Gaussian term ``N(hx, var)``.

    ``var`` is the per-coordinate variance of ``y`` given the state (diagonal of R).
    """
    return obs.sample_y(z, hx, var, rng, y_current=y_current, **params)


def poisson_y_mode_and_curvature(z, mu, var, max_iter=100, tol=1e-8):
    """Per-coordinate mode of ``z y - e^y - (y - mu)^2 / (2 var)`` by damped Newton.

    Returns the mode and the second derivative ``-e^{y*} - 1/var`` there.
    """
    z = np.asarray(z, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), z.shape)
    prec = 1.0 / np.maximum(np.broadcast_to(np.asarray(var, dtype=float), z.shape), VAR_FLOOR)

    def obj(y):
        with np.errstate(over="ignore"):
            return z * y - np.exp(y) - 0.5 * prec * (y - mu) ** 2

    y = mu.astype(float).copy()
    trace = []
    for _ in range(max_iter):
        e = np.exp(y)
        g = z - e - prec * (y - mu)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        trace.append(gnorm)
        if gnorm < tol * (1.0 + float(np.max(z, initial=0.0))):
            return y, -np.exp(y) - prec
        h = -e - prec
        step = -g / h
        f0 = obj(y)
        t = np.ones_like(y)
        for _ in range(60):
            bad = ~(obj(y + t * step) >= f0)
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        y = y + t * step
    raise NumericalError("Poisson mode search did not converge", trace)


def log_jacobian_kappa(z, kappa):
    """``log J_l(kappa)`` for positive ``z``: ``(1/kappa - 1) log z - log kappa``."""
    return (1.0 / kappa - 1.0) * np.log(z) - np.log(kappa)


def rainfall_kappa_logpost(z, hx, sigma, kappa, log_prior):
    """Unnormalized log density of ``kappa`` given positive rainfall amounts."""
    if not kappa > 1.0:
        return -np.inf
    z = np.asarray(z, dtype=float)
    wet = z > RAIN_ZERO
    val = float(log_prior(kappa))
    if np.any(wet):
        zw = z[wet]
        hxw = np.broadcast_to(np.asarray(hx, dtype=float), z.shape)[wet]
        sw = np.broadcast_to(np.asarray(sigma, dtype=float), z.shape)[wet]
        val += float(np.sum(stats.norm.logpdf(zw ** (1.0 / kappa), hxw, sw) + log_jacobian_kappa(zw, kappa)))
    return val


def lognormal_kappa_prior(median=3.0, log_sd=0.5):
    def log_prior(kappa):
        if not kappa > 0:
            return -np.inf
        lk = np.log(kappa)
        return -0.5 * ((lk - np.log(median)) / log_sd) ** 2 - lk

    return log_prior


def mh_update_kappa(z, x, H, sigma, kappa, log_prior, proposal_sd, rng):
    """One random-walk Metropolis step on ``log kappa``; proposals with ``kappa <= 1`` are rejected."""
    if not proposal_sd > 0:
        raise ParameterDomainError("proposal sd must be positive")
    hx = np.asarray(H, dtype=float) @ np.asarray(x, dtype=float)
    prop = float(kappa) * np.exp(proposal_sd * rng.standard_normal())
    lp_new = rainfall_kappa_logpost(z, hx, sigma, prop, log_prior)
    if not np.isfinite(lp_new):
        rng.random()
        return float(kappa)
    lp_old = rainfall_kappa_logpost(z, hx, sigma, kappa, log_prior)
    # Jacobian of the log-scale walk
    log_acc = lp_new - lp_old + np.log(prop) - np.log(kappa)
    if np.log(rng.random()) < log_acc:
        return prop
    return float(kappa)
