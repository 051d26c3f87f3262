"""Scores for predictive samples: squared error of the mean, ensemble CRPS and 1-D earth-mover's distance."""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError


def _weights(w, K):
    if w is None:
        return None
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != K or np.any(w < 0) or not w.sum() > 0:
        raise DegeneracyError("weights must be nonnegative, one per sample, with positive sum")
    return w / w.sum()


def mspe(samples, truth, axis=0, weights=None):
    """Squared error of the (weighted) sample mean, averaged over all target coordinates.

    ``samples`` has the sample index along ``axis``; the remaining shape must
    broadcast against ``truth``.
    """
    s = np.moveaxis(np.asarray(samples, dtype=float), axis, 0)
    if s.shape[0] < 1:
        raise DegeneracyError("mspe needs at least one sample")
    w = _weights(weights, s.shape[0])
    mean = s.mean(axis=0) if w is None else np.tensordot(w, s, axes=1)
    err = mean - np.asarray(truth, dtype=float)
    return float(np.mean(err * err))


def crps_ensemble(samples, truth, axis=0, weights=None):
    """Empirical CRPS ``mean|x_k - y| - mean_{k,l}|x_k - x_l| / 2`` averaged over coordinates.

    The pairwise term uses sorted samples, so the cost is ``O(K log K)`` per
    coordinate.  ``weights`` turns both means into weighted means.
    """
    x = np.moveaxis(np.asarray(samples, dtype=float), axis, 0)
    K = x.shape[0]
    if K < 2:
        raise DegeneracyError("crps_ensemble needs at least two samples")
    y = np.asarray(truth, dtype=float)
    w = _weights(weights, K)
    shape = (K,) + (1,) * (x.ndim - 1)
    if w is None:
        term1 = np.mean(np.abs(x - y), axis=0)
        xs = np.sort(x, axis=0)
        # sum_{k,l} |x_k - x_l| = 2 sum_i (2i - K - 1) x_(i), with i = 1..K
        coef = (2.0 * np.arange(1, K + 1) - K - 1).reshape(shape)
        pair = 2.0 * np.sum(coef * xs, axis=0) / K**2
    else:
        term1 = np.tensordot(w, np.abs(x - y), axes=1)
        order = np.argsort(x, axis=0)
        xs = np.take_along_axis(x, order, axis=0)
        ws = w[order]
        below = np.cumsum(ws, axis=0) - ws
        above = 1.0 - below - ws
        # sum_{k,l} w_k w_l |x_k - x_l| = 2 sum_i w_(i) x_(i) (W_below - W_above)
        pair = 2.0 * np.sum(ws * xs * (below - above), axis=0)
    return float(np.mean(term1 - 0.5 * pair))


def emd_1d(a, wa=None, b=None, wb=None):
    """Wasserstein-1 distance between two weighted samples on the line.

    Integrates ``|F_a - F_b|`` over the merged support, which equals the
    quantile-function integral.  Weights default to uniform and are
    normalized.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DegeneracyError("emd_1d needs non-empty samples")
    wa = np.full(a.size, 1.0 / a.size) if wa is None else np.asarray(wa, dtype=float).ravel() / np.sum(wa)
    wb = np.full(b.size, 1.0 / b.size) if wb is None else np.asarray(wb, dtype=float).ravel() / np.sum(wb)
    pts = np.concatenate([a, b])
    order = np.argsort(pts, kind="mergesort")
    pts = pts[order]
    mass = np.concatenate([wa, -wb])[order]
    diff = np.cumsum(mass)[:-1]
    return float(np.sum(np.abs(diff) * np.diff(pts)))


def rainfall_truth(x, kappa):
    """Rainfall amount ``x^kappa 1(x > 0)`` implied by a latent state."""
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, np.maximum(x, 0.0) ** kappa, 0.0)


@dataclass(frozen=True)
class ScoreReport:
    mspe: float
    crps: float
    emd: float = float("nan")
    n_targets: int = 0

    def __post_init__(self):
        for name in ("mspe", "crps"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not (np.isnan(self.emd) or self.emd >= 0):
            raise ValueError("emd must be nonnegative")


def score_samples(samples, truth, axis=0, weights=None):
    s = np.asarray(samples)
    n_targets = int(np.asarray(truth).size)
    return ScoreReport(
        mspe(s, truth, axis, weights), crps_ensemble(s, truth, axis, weights), n_targets=n_targets
    )
