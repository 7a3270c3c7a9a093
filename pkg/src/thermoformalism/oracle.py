"""Independent pressure computations used to cross-check the operator pipeline."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .dynamics import DEFAULT_NODE_BUDGET, periodic_orbits, preimage_tree


def pressure_preimage_sum(fmap, phi, x0, n, budget=DEFAULT_NODE_BUDGET, estimator="mean"):
    """Pressure from the preimage tree of depth ``n`` rooted at ``x0``.

    Parameters
    ----------
    estimator : {"mean", "ratio"}
        ``"mean"`` returns ``(1/n) log (L^n 1)(x0)``, which carries an
        ``O(1/n)`` bias from the eigenfunction value at ``x0``.
        ``"ratio"`` returns ``log (L^n 1)(x0) - log (L^{n-1} 1)(x0)``; the bias
        cancels and the error decays geometrically for expanding maps.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    log_z = float(logsumexp(preimage_tree(fmap, phi, x0, n, budget=budget).weights))
    if estimator == "mean":
        return log_z / n
    if estimator == "ratio":
        if n == 1:
            return log_z
        prev = float(logsumexp(preimage_tree(fmap, phi, x0, n - 1, budget=budget).weights))
        return log_z - prev
    raise ValueError(f"unknown estimator {estimator!r}")


def pressure_periodic_sum(fmap, phi, n, budget=2**22):
    """``(1/n) log sum_{f^n x = x} exp(S_n phi(x))`` over all period-``n`` points.

    Raises :class:`~thermoformalism.errors.NotExpanding` for maps with neutral
    points.
    """
    orbits, _ = periodic_orbits(fmap, n, budget=budget)
    m = orbits.shape[0]
    pts = orbits.reshape(m * n, -1) if fmap.dim > 1 else orbits.reshape(-1)
    S = np.asarray(phi(pts)).reshape(m, n).sum(axis=1)
    return float(logsumexp(S) / n)


def closed_form_pressure_pl(slopes, t):
    """``log sum_j slope_j^-t`` for a full-branch piecewise-linear map."""
    s = np.asarray(slopes, dtype=float)
    if np.any(s <= 1):
        raise ValueError("slopes must exceed 1")
    t = np.asarray(t, dtype=float)
    out = logsumexp(-np.multiply.outer(t, np.log(s)), axis=-1)
    return float(out) if out.ndim == 0 else out


def closed_form_derivative_pl(slopes, t):
    """``d/dt`` of :func:`closed_form_pressure_pl`."""
    logs = np.log(np.asarray(slopes, dtype=float))
    w = np.exp(-np.multiply.outer(np.asarray(t, dtype=float), logs))
    return -(w @ logs) / w.sum(axis=-1)


def dense_spectrum_oracle(op, max_n=64):
    """All eigenvalues of a small operator, sorted by decreasing modulus."""
    if op.N > max_n:
        raise ValueError(f"dense oracle limited to N <= {max_n}")
    ev = np.linalg.eigvals(op.dense())
    return ev[np.argsort(-np.abs(ev), kind="stable")]
