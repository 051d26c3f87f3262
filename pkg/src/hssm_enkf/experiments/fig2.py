"""Likelihood comparison on the independent Gaussian example (four panels)."""

import numpy as np

from ..likelihood import fit_growth, loglik_draws, minimal_ensemble_size
from ..rng import stream
from .io import RunOutputs, map_replications

KAPPA = 4.0
THETA = 1.0


def true_loglik(y, theta, kappa=KAPPA):
    v = kappa + theta
    return float(-0.5 * np.sum(np.log(2 * np.pi * v) + y * y / v))


def likelihood_ratios(n, N, reps, seed, kappa=KAPPA, theta=THETA):
    """Ratios of EnKF and particle likelihoods to the exact one at fixed data, over fresh ensembles."""
    y = stream(seed, "fig2-data", n).standard_normal(n) * np.sqrt(kappa + theta)
    exact = true_loglik(y, theta, kappa)
    out = {}
    for est in ("enkf", "particle"):
        ll = loglik_draws(est, y, N, reps, kappa, theta, stream(seed, "fig2-ratios", est, n), method="ensemble")
        out[est] = np.exp(ll - exact)
    return out


def pseudo_marginal_chain(estimator, y, N, iters, proposal_sd, seed, theta0=THETA, kappa=KAPPA):
    """Random-walk MH on ``theta > 0`` (flat prior) with a noisy log likelihood that is reused until acceptance."""
    rng = stream(seed, "fig2-mh", estimator)

    def loglik(th):
        return float(loglik_draws(estimator, y, N, 1, kappa, th, rng)[0])

    theta = theta0
    cur = loglik(theta)
    chain = np.empty(iters)
    accepted = 0
    for i in range(iters):
        cand = theta + proposal_sd * rng.standard_normal()
        if cand > 0:
            new = loglik(cand)
            if np.log(rng.random()) < new - cur:
                theta, cur = cand, new
                accepted += 1
        chain[i] = theta
    return chain, accepted / iters


def longest_constant_run(chain):
    best = run = 1
    for a, b in zip(chain[:-1], chain[1:]):
        run = run + 1 if a == b else 1
        best = max(best, run)
    return best


def _min_n_task(args):
    est, n, reps, y_real, seed, n_max = args
    N, cens, v = minimal_ensemble_size(est, n, 2.0, n_max, reps, y_real, KAPPA, THETA, seed)
    return {"n": n, "estimator": est, "minimal_N": N, "censored_flag": cens, "variance_at_minimal_N": v}


def run_fig2(config):
    out = RunOutputs()
    seed = config.seed
    N = int(config.get("N", 50))
    reps = config.reps("ratio_reps", 1000, minimum=20)

    # panels a and b
    rows = []
    for panel, n in (("a", 1), ("b", 6)):
        ratios = likelihood_ratios(n, N, reps, seed)
        for est, r in ratios.items():
            rows += [{"panel": panel, "n": n, "estimator": est, "ratio": float(v)} for v in r]
            logs = np.log(r)
            q1, q3 = np.percentile(r, [25, 75])
            out.summary[f"{panel}_{est}"] = {
                "mean_ratio": float(np.mean(r)),
                "var_loglik": float(np.var(logs, ddof=1)),
                "iqr": float(q3 - q1),
            }
            out.add_score(est, f"fig2{panel}_n{n}", "mean_ratio", np.mean(r), reps)
            out.add_score(est, f"fig2{panel}_n{n}", "var_loglik", np.var(logs, ddof=1), reps)
            out.add_score(est, f"fig2{panel}_n{n}", "ratio_iqr", q3 - q1, reps)
    out.plotdata["fig2ab_ratios"] = rows

    # panel c
    n_mh = int(config.get("mh_n", 50))
    iters = config.reps("mh_iters", 10000, minimum=200)
    sd = float(config.get("mh_proposal_sd", 0.8))
    y = stream(seed, "fig2-mh-data").standard_normal(n_mh) * np.sqrt(KAPPA + THETA)
    trace = []
    for est in ("enkf", "particle"):
        chain, acc = pseudo_marginal_chain(est, y, n_mh, iters, sd, seed)
        trace += [{"estimator": est, "iter": i, "theta": float(v)} for i, v in enumerate(chain)]
        run = longest_constant_run(chain)
        out.summary[f"c_{est}"] = {"acceptance": acc, "longest_constant_run": run}
        out.add_score(est, "fig2c", "acceptance_rate", acc, iters)
        out.add_score(est, "fig2c", "longest_constant_run", run, iters)
        out.diagnostics.append({"panel": "c", "estimator": est, "acceptance": acc, "longest_constant_run": run})
    out.plotdata["fig2c_mh_trace"] = trace

    # panel d
    n_grid = tuple(config.get("n_grid", (1, 2, 4, 8, 16, 32)))
    v_reps = config.reps("var_replications", 250, minimum=10)
    y_real = config.reps("var_y_realizations", 100, minimum=5)
    n_max = int(config.get("N_max", 2**20))
    tasks = [(est, n, v_reps, y_real, seed, n_max) for n in n_grid for est in ("enkf", "particle")]
    study = map_replications(_min_n_task, tasks, config.workers)
    out.plotdata["fig2d_minimal_N"] = study
    for r in study:
        out.diagnostics.append({"panel": "d", **r})
    fits = []
    for est, log_scale in (("enkf", False), ("particle", True)):
        slope, icpt, r2 = fit_growth(study, est, log_scale)
        fits.append({"estimator": est, "scale": "log" if log_scale else "original", "slope": slope, "intercept": icpt, "r2": r2})
        out.summary[f"d_{est}_fit"] = {"slope": slope, "intercept": icpt, "r2": r2}
        out.add_score(est, "fig2d", "fit_r2", r2, v_reps)
        out.add_score(est, "fig2d", "fit_slope", slope, v_reps)
    out.plotdata["fig2d_fits"] = fits
    top = max(n_grid)
    by = {r["estimator"]: r for r in study if r["n"] == top}
    ratio = by["particle"]["minimal_N"] / by["enkf"]["minimal_N"]
    out.summary["d_ratio_at_max_n"] = {"n": top, "ratio": ratio, "particle_censored": by["particle"]["censored_flag"]}
    out.add_score("particle_over_enkf", "fig2d", f"minimal_N_ratio_n{top}", ratio, v_reps)
    return out
