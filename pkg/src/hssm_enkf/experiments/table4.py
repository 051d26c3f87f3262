"""Smoothing for the scaled Lorenz-96 model: GEnKS, EnKS with state augmentation and particle Gibbs."""

import logging

import numpy as np

from ..enkf import augment_state, augmented_taper, enks_run
from ..ensemble import TaperSpec, resolve_taper
from ..errors import DivergenceError
from ..model import build_lorenz96, simulate
from ..rng import stream
from ..scoring import crps_ensemble, mspe
from ..smoothers import genks_run, particle_gibbs_run
from .io import RunOutputs, map_replications

log = logging.getLogger(__name__)

METHODS = ("GEnKS", "EnKS+SA", "Particle Gibbs", "Prior")


def _settings(config):
    return {
        "T": int(config.get("T", 10)),
        "N": int(config.get("N", 50)),
        "N_sa": int(config.get("N_sa", 1000)),
        "iters": int(config.get("iters", 100)),
        "burn_in": int(config.get("burn_in", 20)),
        "space_radius": float(config.get("space_radius", 8.0)),
        "lag_radius": int(config.get("lag_radius", 3)),
        "theta_start": float(config.get("theta_start", 0.5)),
        "sa_walk_sd": float(config.get("sa_walk_sd", 0.1)),
        "prior_draws": int(config.get("prior_draws", 1000)),
        "max_redraws": int(config.get("max_redraws", 20)),
    }


def _simulate(model, seed, rep, max_redraws):
    """Data for one replication; diverging trajectories are redrawn and counted."""
    for attempt in range(max_redraws + 1):
        rng = stream(seed, "table4-data", rep, attempt)
        theta = model.param_init.sample(rng, 1)[0]
        try:
            data = simulate(model, rng, theta0=theta)
        except DivergenceError as exc:
            log.info("replication %d attempt %d diverged: %s", rep, attempt, exc)
            continue
        if np.all(np.isfinite(data.x)):
            return data, float(theta[0]), attempt
    raise DivergenceError(f"replication {rep} diverged {max_redraws + 1} times")


def _score(theta_samples, theta_true, x_samples=None, x_true=None):
    out = {
        "theta_MSPE": mspe(theta_samples, theta_true),
        "theta_CRPS": crps_ensemble(theta_samples, theta_true),
    }
    if x_samples is not None:
        out["x_MSPE"] = mspe(x_samples, x_true)
        out["x_CRPS"] = crps_ensemble(x_samples, x_true)
    return out


def run_replication(args):
    rep, seed, s, methods = args
    model = build_lorenz96(T=s["T"])
    data, theta_true, redraws = _simulate(model, seed, rep, s["max_redraws"])
    z = list(data.z)
    taper = TaperSpec(s["space_radius"], distance="periodic")
    res = {}
    trace = {}
    if "GEnKS" in methods:
        d = genks_run(
            model, z, s["N"], s["iters"], s["burn_in"], taper, k=s["lag_radius"],
            rng=stream(seed, "table4-genks", rep), theta_init=[s["theta_start"]], lag_taper=True,
        )
        th, xs = d.kept()
        res["GEnKS"] = _score(th[:, 0, 0], theta_true, xs, data.x)
        trace["GEnKS"] = d.theta[:, 0, 0]
    if "EnKS+SA" in methods:
        aug = augment_state(model, ("theta",), s["sa_walk_sd"], base_theta=[s["theta_start"]], init_mean=s["theta_start"])
        tmat = augmented_taper(resolve_taper(taper, model.n), 1)
        r = enks_run(
            aug, z, None, N=s["N_sa"], taper=tmat, k=s["lag_radius"],
            rng=stream(seed, "table4-sa", rep), lag_taper=True,
        )
        ens = np.stack([e.members for e in r.smoothed])  # (T, n + 1, N)
        th_samples = ens[:, -1, :].T  # (N, T)
        x_samples = np.transpose(ens[:, :-1, :], (2, 0, 1))
        with np.errstate(over="ignore", invalid="ignore"):
            res["EnKS+SA"] = _score(th_samples, theta_true, x_samples, data.x)
    if "Particle Gibbs" in methods:
        d = particle_gibbs_run(
            model, z, s["N"], s["iters"], s["burn_in"], rng=stream(seed, "table4-pg", rep), theta_init=[s["theta_start"]]
        )
        th, xs = d.kept()
        res["Particle Gibbs"] = _score(th[:, 0, 0], theta_true, xs, data.x)
        trace["Particle Gibbs"] = d.theta[:, 0, 0]
        res["Particle Gibbs"]["unique_t1_one_frac"] = float(np.mean(d.diagnostics["unique_t1"] == 1))
    if "Prior" in methods:
        c = model.constants
        draws = c["prior_mean"] + c["prior_sd"] * stream(seed, "table4-prior", rep).standard_normal(s["prior_draws"])
        res["Prior"] = _score(draws, theta_true)
    return rep, theta_true, redraws, res, trace, data.x


def run_table4(config):
    s = _settings(config)
    reps = config.reps("reps", 100)
    methods = tuple(config.get("methods", METHODS))
    results = map_replications(run_replication, [(r, config.seed, s, methods) for r in range(reps)], config.workers)
    out = RunOutputs()
    per_rep = []
    redraw_total = 0
    for rep, theta_true, redraws, res, trace, _ in results:
        redraw_total += redraws
        for meth, sc in res.items():
            per_rep.append({"replication": rep, "method": meth, "theta_true": theta_true, **sc})
            out.diagnostics.append({"replication": rep, "method": meth, "theta_true": theta_true, "redraws": redraws, **sc})
        if rep == 0:
            rows = []
            for meth, tr in trace.items():
                rows += [{"method": meth, "iter": i, "theta": float(v)} for i, v in enumerate(tr)]
            out.plotdata["fig5b_theta_trace"] = rows
    for meth in methods:
        rows = [p for p in per_rep if p["method"] == meth]
        for metric in ("theta_MSPE", "theta_CRPS", "x_MSPE", "x_CRPS"):
            vals = [p[metric] for p in rows if metric in p]
            if vals:
                v = float(np.mean(vals))
                out.add_score(meth, "lorenz96", metric, v, len(vals))
                out.summary[(meth, metric)] = v
    out.summary["redraws"] = redraw_total
    out.add_score("all", "lorenz96", "diverged_redraws", redraw_total, reps)
    out.plotdata["table4_replications"] = per_rep
    return out
