"""Ad hoc runs: one filter or smoother on data simulated from a registered model."""

import numpy as np

from ..enkf import enks_run
from ..ensemble import TaperSpec
from ..errors import ConfigurationError
from ..extended_filters import genkf_run, penkf_run
from ..model import build_named_model, simulate
from ..rng import stream
from ..scoring import crps_ensemble, mspe
from ..smoothers import genks_run
from .io import RunOutputs, map_replications

CUSTOM_METHODS = ("enks", "genkf", "penkf", "genks")


def model_kwargs(config):
    """Builder keyword arguments given as ``model.<name>=value`` overrides."""
    return {k.split(".", 1)[1]: v for k, v in config.overrides.items() if k.startswith("model.")}


def _state_samples(method, model, z, theta_path, s, rng):
    """Per-time state samples with the sample index first: shape ``(K, T, n)`` plus weights."""
    taper = TaperSpec(s["taper_range"], distance=s["distance"]) if s["taper_range"] else None
    if method == "enks":
        if not model.obs.degenerate:
            raise ConfigurationError("method 'enks' needs Gaussian data (z = y); use genkf, penkf or genks")
        r = enks_run(model, z, list(theta_path), N=s["N"], taper=taper, k=s["lag"], rng=rng)
        return np.stack([e.members for e in r.smoothed], axis=0).transpose(2, 0, 1), None
    if method == "genkf":
        steps = genkf_run(model, z, s["N"], taper=taper, iters=s["iters"], rng=rng)
        return np.stack([st.x for st in steps], axis=0).transpose(2, 0, 1), None
    if method == "penkf":
        hist, _ = penkf_run(model, z, s["M"], s["N"], rng, taper=taper)
        # final weights apply per time to the filtering clouds stored at that time
        per_t = [sys_t.ens.transpose(0, 2, 1).reshape(-1, model.n) for sys_t in hist]
        w = [np.repeat(sys_t.weights, sys_t.ens.shape[2]) for sys_t in hist]
        return np.stack(per_t, axis=1), w
    if method == "genks":
        d = genks_run(model, z, s["N"], s["iters"], s["burn_in"], taper, k=s["lag"], rng=rng)
        return d.kept()[1], None
    raise ConfigurationError(f"unknown method {method!r}; choose from {CUSTOM_METHODS}")


def run_replication(args):
    rep, seed, name, kw, method, s = args
    model = build_named_model(name, **kw)
    data = simulate(model, stream(seed, "custom-data", name, rep), T=s["T"])
    samples, w = _state_samples(method, model, list(data.z), data.theta[1:], s, stream(seed, "custom", method, rep))
    T = data.x.shape[0]
    if w is None:
        return rep, mspe(samples, data.x), crps_ensemble(samples, data.x)
    ms = [mspe(samples[:, t], data.x[t], weights=w[t]) for t in range(T)]
    cr = [crps_ensemble(samples[:, t], data.x[t], weights=w[t]) for t in range(T)]
    return rep, float(np.mean(ms)), float(np.mean(cr))


def run_custom(config):
    name = config.get("model", "lorenz96")
    method = config.get("method", "genks")
    if method not in CUSTOM_METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {CUSTOM_METHODS}")
    kw = model_kwargs(config)
    s = {
        "T": config.get("T", None),
        "N": int(config.get("N", 50)),
        "M": int(config.get("M", 20)),
        "iters": int(config.get("iters", 3 if method == "genkf" else 50)),
        "burn_in": int(config.get("burn_in", 10)),
        "lag": config.get("lag", None),
        "taper_range": config.get("taper_range", None),
        "distance": config.get("distance", "periodic" if name == "lorenz96" else "linear"),
    }
    reps = config.reps("reps", int(config.get("full_reps", 10)))
    results = map_replications(run_replication, [(r, config.seed, name, kw, method, s) for r in range(reps)], config.workers)
    out = RunOutputs()
    for rep, ms, cr in results:
        out.diagnostics.append({"replication": rep, "method": method, "x_MSPE": ms, "x_CRPS": cr})
    out.add_score(method, name, "x_MSPE", float(np.mean([r[1] for r in results])), reps)
    out.add_score(method, name, "x_CRPS", float(np.mean([r[2] for r in results])), reps)
    out.plotdata["custom_replications"] = [{"replication": r, "x_MSPE": m, "x_CRPS": c} for r, m, c in results]
    return out
