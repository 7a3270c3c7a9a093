"""Pressure curves, equilibrium states and diagnostics built on the operator."""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import CircleMap, SkewProduct, preimage_tree, reduce_mod1
from .errors import GapCollapsed, InsufficientRefinement, NonSmoothPoint
from .operator import (Scheme, build, geometry, gauss_legendre, leading_eigentriple, pressure_derivative,
                       scheme_tolerance, subleading_modulus)
from .potentials import Potential

GAP_COLLAPSE = 0.99
EQUILIBRIUM_GAP_LIMIT = 0.999
REASONS = ("kink", "gap_collapse", "freezing", "boundary_dominance")


def as_scheme(scheme, N=None):
    return scheme if isinstance(scheme, Scheme) else Scheme(scheme, int(N))


# ---------------------------------------------------------------------------
# finite differences

def first_differences(t, P):
    """Second-order accurate derivative on a possibly nonuniform grid."""
    if len(t) < 3:
        return np.gradient(P, t) if len(t) > 1 else np.full(len(t), np.nan)
    return np.gradient(P, t, edge_order=2)


def second_differences(t, P):
    """Three-point second derivative at interior nodes (NaN at the ends)."""
    out = np.full(len(t), np.nan)
    if len(t) >= 3:
        hm = t[1:-1] - t[:-2]
        hp = t[2:] - t[1:-1]
        out[1:-1] = 2.0 * ((P[2:] - P[1:-1]) / hp - (P[1:-1] - P[:-2]) / hm) / (hp + hm)
    return out


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class PressureCurve:
    t: np.ndarray
    P: np.ndarray
    P_fd: np.ndarray
    P_mu: np.ndarray
    P2_fd: np.ndarray
    gap_ratio: np.ndarray
    converged: np.ndarray
    scheme: Scheme
    tol: float
    sup_norm: float
    log_degree: float
    transition_candidates: list = field(default_factory=list)
    labels: Optional[list] = None
    margin: Optional[np.ndarray] = None

    @property
    def N(self):
        return self.scheme.N

    def convexity_min(self):
        v = self.P2_fd[1:-1]
        return float(np.min(v)) if len(v) else 0.0

    def lipschitz_ratio(self):
        """Largest ``|P(t_i) - P(t_j)| / |t_i - t_j|`` over all grid pairs."""
        dt = np.abs(self.t[:, None] - self.t[None, :])
        dP = np.abs(self.P[:, None] - self.P[None, :])
        mask = dt > 0
        return float(np.max(dP[mask] / dt[mask])) if mask.any() else 0.0

    def checks(self, convex_tol=1e-6):
        """Invariant checks run on every sweep."""
        out = {
            "convexity_min": self.convexity_min(),
            "convex": self.convexity_min() >= -convex_tol,
            "lipschitz_ratio": self.lipschitz_ratio(),
            "lipschitz": self.lipschitz_ratio() <= self.sup_norm + 1e-9,
        }
        if np.any(self.t == 0.0):
            p0 = float(self.P[np.nonzero(self.t == 0.0)[0][0]])
            out["P0_minus_log_degree"] = p0 - self.log_degree
        return out

    def columns(self):
        return ["t", "P", "P_fd", "P_mu", "P2_fd", "gap_ratio", "converged", "label", "margin"]

    def rows(self):
        for i in range(len(self.t)):
            label = self.labels[i] if self.labels is not None else ""
            margin = self.margin[i] if self.margin is not None else np.nan
            yield (self.t[i], self.P[i], self.P_fd[i], self.P_mu[i], self.P2_fd[i], self.gap_ratio[i],
                   bool(self.converged[i]), label, margin)


_SWEEP_CONTEXT = {}


def _sweep_point(i):
    ctx = _SWEEP_CONTEXT
    op = build(ctx["map"], ctx["phi"], ctx["scheme"], t=float(ctx["t"][i]), phi_values=ctx["values"])
    rep = leading_eigentriple(op, max_iter=ctx["max_iter"])
    gap = np.nan
    if ctx["with_gap"]:
        subleading_modulus(op, rep)
        gap = rep.gap_ratio
    dP = pressure_derivative(op, rep)
    return rep.pressure, dP, gap, rep.converged


def _run_points(n, workers):
    if workers <= 1 or n <= 1:
        return [_sweep_point(i) for i in range(n)]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(_sweep_point, range(n), chunksize=1)


def pressure_sweep(fmap, phi, t_grid, scheme, N=None, workers=1, with_gap=True, max_iter=1000):
    """Pressure of ``t phi`` over ``t_grid`` with derivative and gap columns.

    ``P_mu`` is the integral of ``phi`` against the discrete equilibrium state,
    i.e. the exact ``t``-derivative of the discrete pressure. Non-converged
    points are flagged and the sweep continues.
    """
    scheme = as_scheme(scheme, N)
    t = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    geom = geometry(fmap, scheme)
    values = np.asarray(phi(geom.points), dtype=float)
    _SWEEP_CONTEXT.clear()
    _SWEEP_CONTEXT.update(map=fmap, phi=phi, scheme=scheme, t=t, values=values, with_gap=with_gap,
                          max_iter=max_iter)
    try:
        results = _run_points(len(t), workers)
    finally:
        _SWEEP_CONTEXT.clear()
    P = np.array([r[0] for r in results])
    P_mu = np.array([r[1] for r in results])
    gap = np.array([r[2] for r in results])
    conv = np.array([r[3] for r in results], dtype=bool)
    return PressureCurve(
        t=t, P=P, P_fd=first_differences(t, P), P_mu=P_mu, P2_fd=second_differences(t, P), gap_ratio=gap,
        converged=conv, scheme=scheme, tol=scheme_tolerance(scheme, geom), sup_norm=phi.sup_norm,
        log_degree=float(np.log(fmap.degree)),
    )


def refine_grid(t, candidates, factor=4):
    """Insert ``factor - 1`` extra points per grid step inside candidate intervals."""
    t = np.asarray(t, dtype=float)
    extra = []
    for lo, hi, _ in candidates:
        for a, b in zip(t[:-1], t[1:]):
            if a >= lo and b <= hi:
                extra.append(a + (b - a) * np.arange(1, factor) / factor)
    return np.unique(np.concatenate([t] + extra)) if extra else t


# ---------------------------------------------------------------------------
# equilibrium states

class EquilibriumState:
    """Discrete equilibrium state ``mu_i = h_i nu_i`` of a discretised operator.

    ``integrate(g)`` uses ``int g dmu = nu(L(g h)) / lambda``, which evaluates
    ``g`` at the preimage points of the discretisation; ``grid_integrate``
    sums ``mu_i g(p_i)`` at cell centres or nodes.
    """

    def __init__(self, op, report):
        self.op = op
        self.report = report
        self.weights = report.h * report.nu
        self.points = op.coords
        self.scheme = op.scheme
        self.N = op.N
        self.map = op.map

    def integrate(self, g):
        vals = np.asarray(g(self.op.geometry.points), dtype=float)
        Mg = self.op.weighted_matrix(vals)
        rep = self.report
        return float(np.dot(rep.nu, Mg @ rep.h) / (rep.lambda1_shifted * np.dot(rep.nu, rep.h)))

    def grid_integrate(self, g):
        geom = self.op.geometry
        if self.scheme.kind == "ulam" and geom.cell_widths is not None and len(geom.shape) == 1:
            gx, gw = gauss_legendre(4)
            lo = self.points - 0.5 * geom.cell_widths
            pts = lo[:, None] + geom.cell_widths[:, None] * gx[None, :]
            cell_avg = (np.asarray(g(pts.ravel())).reshape(pts.shape) * gw[None, :]).sum(axis=1)
            return float(np.dot(self.weights, cell_avg))
        return float(np.dot(self.weights, np.asarray(g(self.points), dtype=float)))

    def invariance_defect(self, g):
        """``|int g o f dmu - int g dmu|`` for an observable ``g``."""
        return abs(self.integrate(lambda p: g(self.map.eval(p))) - self.integrate(g))

    @property
    def error_bound(self):
        return scheme_tolerance(self.scheme, self.op.geometry)


def equilibrium_state(fmap, phi, scheme, N=None, t=1.0):
    """Equilibrium state of ``t phi``; raises :class:`GapCollapsed` near gap collapse."""
    op = build(fmap, phi, as_scheme(scheme, N), t=t)
    rep = leading_eigentriple(op)
    subleading_modulus(op, rep)
    if not rep.gap_ratio < EQUILIBRIUM_GAP_LIMIT:
        raise GapCollapsed(f"gap ratio {rep.gap_ratio:.6f} >= {EQUILIBRIUM_GAP_LIMIT}")
    return EquilibriumState(op, rep)


@dataclass
class DiscreteMeasure:
    """Finitely supported probability measure."""

    points: np.ndarray
    weights: np.ndarray

    def integrate(self, g):
        return float(np.dot(self.weights, np.asarray(g(self.points), dtype=float)))


def mme_preimage_measure(fmap, x0, n, budget=None):
    """Uniform measure on ``f^-n(x0)``: an independent proxy for the max-entropy measure."""
    kw = {} if budget is None else {"budget": budget}
    tree = preimage_tree(fmap, lambda p: np.zeros(len(np.atleast_1d(p)) if fmap.dim == 1 else len(p)), x0, n, **kw)
    m = len(tree)
    return DiscreteMeasure(points=tree.leaves, weights=np.full(m, 1.0 / m))


def entropy_via_legendre(curve: PressureCurve, t):
    """``P(t) - t P'(t)`` with ``P'`` from the equilibrium-state integral."""
    for lo, hi, _ in curve.transition_candidates:
        if lo <= t <= hi:
            raise NonSmoothPoint(f"t={t} lies in candidate interval [{lo}, {hi}]")
    if not curve.t[0] <= t <= curve.t[-1]:
        raise ValueError("t outside the curve")
    P = float(np.interp(t, curve.t, curve.P))
    dP = float(np.interp(t, curve.t, curve.P_mu))
    h = P - t * dP
    return max(h, -curve.tol)


# ---------------------------------------------------------------------------
# Lyapunov exponents and certificates

@dataclass
class LyapunovExponents:
    exponents: tuple
    lambda_min: float


def lyapunov_exponents(mu, fmap):
    if isinstance(fmap, SkewProduct):
        base = mu.integrate(lambda p: fmap.log_base_conorm(p))
        fib = mu.integrate(lambda p: fmap.log_fiber_derivative(p))
        return LyapunovExponents((base, fib), min(base, fib))
    lam = mu.integrate(lambda p: fmap.log_conorm(p))
    return LyapunovExponents((lam,), lam)


def log_conorm_iterate(fmap, p, l):
    """``log`` of the smallest singular value of ``Df^l`` at each point."""
    q = np.asarray(p, dtype=float)
    if fmap.dim == 1:
        acc = np.zeros(len(np.atleast_1d(q)))
        for _ in range(l):
            acc += np.atleast_1d(fmap.log_conorm(q))
            q = fmap.eval(q)
        return acc
    q = q.reshape(-1, fmap.dim)
    D = np.broadcast_to(np.eye(fmap.dim), (len(q), fmap.dim, fmap.dim)).copy()
    for _ in range(l):
        D = np.einsum("mij,mjk->mik", fmap.derivative(q).reshape(len(q), fmap.dim, fmap.dim), D)
        q = fmap.eval(q)
    return np.log(np.linalg.svd(D, compute_uv=False)[:, -1])


@dataclass
class Certificate:
    certified: bool
    l: Optional[int]
    value: Optional[float]
    values: list


def expanding_on_average_certificate(mu, fmap, l_max=4):
    """Smallest ``l <= l_max`` with ``int log conorm(Df^l) dmu > 0``."""
    if l_max < 1:
        raise ValueError("l_max >= 1")
    values = []
    for l in range(1, l_max + 1):
        v = mu.integrate(lambda p, l=l: log_conorm_iterate(fmap, p, l))
        values.append(v)
        if v > 0:
            return Certificate(True, l, v, values)
    return Certificate(False, None, None, values)


# ---------------------------------------------------------------------------
# skew products

def _restricted(phi, fixed, axis, dim=2):
    """Circle potential from ``phi`` with one coordinate frozen."""

    def f(u):
        P = np.empty((len(u), dim))
        P[:, axis] = u
        P[:, 1 - axis] = fixed
        return phi(P)

    return Potential(f, kind="custom_grid", dim=1, sup_norm=phi.sup_norm, regularity=phi.regularity,
                     spec={"kind": "restricted", "axis": axis, "value": float(fixed), "inner": phi.spec})


def invariant_fiber_breakpoints(F: SkewProduct, samples=64):
    """Fibre breakpoints ``a`` with ``f_x(a) = a`` for all sampled ``x``."""
    x = (np.arange(samples) + 0.5) / samples
    out = []
    for a in F.family.profile.breakpoints:
        img = F.family.eval(x, np.full(samples, a))
        if np.max(np.minimum(np.abs(img - a), 1 - np.abs(img - a))) < 1e-12:
            out.append(float(a))
    return out


def invariant_base_breakpoints(F: SkewProduct):
    if not isinstance(F.base, CircleMap):
        return []
    return [float(x) for x in F.base_breakpoints if F.base.is_fixed(x)]


@dataclass
class SkewReport:
    t: np.ndarray
    P_full: np.ndarray
    fiber_boundary: dict
    base_boundary: dict
    labels: list
    margin: np.ndarray
    tol: float
    full_curve: PressureCurve

    def subsystem_ok(self):
        return bool(np.all(self.margin >= -2 * self.tol))


def skew_boundary_analysis(F: SkewProduct, phi, t_grid, scheme, N=None, boundary_N=None, workers=1):
    """Compare the full pressure with the pressures of invariant boundary circles.

    Fibre boundaries are the invariant circles ``y = a_j`` (base map with
    ``x -> phi(x, a_j)``); base boundaries are the invariant circles
    ``x = x_i`` (fibre map ``f_{x_i}`` with ``y -> phi(x_i, y)``).
    """
    if F.class_tag not in ("TM2", "TM3"):
        raise ValueError("boundary analysis needs constant fibre breakpoints (TM2 or TM3)")
    scheme = as_scheme(scheme, N)
    t = np.asarray(t_grid, dtype=float)
    full = pressure_sweep(F, phi, t, scheme, workers=workers, with_gap=False)
    bN = boundary_N or (4 * scheme.N if scheme.kind == "ulam" else scheme.N)
    bscheme = Scheme(scheme.kind, bN)
    fiber_b, base_b = {}, {}
    tol = full.tol
    for j, a in enumerate(invariant_fiber_breakpoints(F)):
        c = pressure_sweep(F.base, _restricted(phi, a, axis=0), t, bscheme, workers=workers, with_gap=False)
        fiber_b[j] = c.P
        tol = max(tol, c.tol)
    for i, x in enumerate(invariant_base_breakpoints(F)):
        c = pressure_sweep(F.family.fiber_map(x), _restricted(phi, x, axis=1), t, bscheme, workers=workers,
                           with_gap=False)
        base_b[i] = c.P
        tol = max(tol, c.tol)
    named = [(f"fiber_boundary({j})", v) for j, v in fiber_b.items()]
    named += [(f"base_boundary({i})", v) for i, v in base_b.items()]
    labels, margin = [], np.full(len(t), np.inf)
    for k in range(len(t)):
        if not named:
            labels.append("interior")
            continue
        vals = np.array([v[k] for _, v in named])
        best = float(vals.max())
        margin[k] = full.P[k] - best
        if margin[k] > 2 * tol:
            labels.append("interior")
            continue
        top = [name for (name, _), v in zip(named, vals) if v >= best - 2 * tol]
        labels.append(top[0] if len(top) == 1 else "tie")
    full.labels = labels
    full.margin = margin
    return SkewReport(t=t, P_full=full.P, fiber_boundary=fiber_b, base_boundary=base_b, labels=labels,
                      margin=margin, tol=tol, full_curve=full)


# ---------------------------------------------------------------------------
# phase-transition scan

@dataclass
class ScanResult:
    candidates: list
    analytic_set: list
    flags: dict


def _runs(mask):
    """Index ranges ``(i, j)`` of consecutive true entries."""
    out, i, n = [], 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def _freezing_mask(t, P, tol):
    n = len(t)
    m = max(3, int(np.ceil(0.25 * n)))
    if n < 4 or m >= n:
        return np.zeros(n, dtype=bool)
    coef = np.polyfit(t[-m:], P[-m:], 1)
    line = np.polyval(coef, t)
    close = np.abs(P - np.maximum(0.0, line)) < 10 * tol
    if not close[-m:].all():
        return np.zeros(n, dtype=bool)
    # an affine curve is not a freezing transition
    if np.all(np.abs(P - line) < 10 * tol):
        return np.zeros(n, dtype=bool)
    k = n - 1
    while k > 0 and close[k - 1]:
        k -= 1
    mask = np.zeros(n, dtype=bool)
    mask[k:] = True
    return mask


def _local_baseline(P2, i, half=4):
    """Median of ``P2`` in a window around ``i`` that skips ``i - 1 .. i + 1``."""
    n = len(P2)
    idx = [j for j in range(max(i - half, 0), min(i + half + 1, n)) if abs(j - i) > 1]
    vals = P2[idx]
    vals = vals[np.isfinite(vals)]
    return float(np.median(vals)) if len(vals) else np.inf


def _kink_mask(curves):
    """Second differences that spike above their neighbours and persist under refinement.

    A jump ``D`` in ``P'`` shows up as ``|P2_fd| ~ D / dt`` on one or two grid
    points, while smooth curvature varies on the scale of the grid.
    """
    fine, coarse = curves[-1], curves[-2]
    P2 = np.abs(fine.P2_fd)
    P2c = np.abs(coarse.P2_fd)
    # a P error of size tol moves P2_fd by about 4 tol / dt^2
    floor = 10 * fine.tol / np.min(np.diff(fine.t)) ** 2 if len(fine.t) > 1 else np.inf
    mask = np.zeros(len(P2), dtype=bool)
    for i in range(1, len(P2) - 1):
        if not np.isfinite(P2[i]) or P2[i] <= floor or not P2[i] >= 0.9 * P2c[i]:
            continue
        mask[i] = P2[i] > 10 * max(_local_baseline(P2, i), 1e-12)
    return mask


def phase_transition_scan(curve, refinement_curves, skew_report=None):
    """Flag t-intervals where the pressure is numerically non-analytic.

    ``refinement_curves`` are sweeps on the same grid at increasing resolution
    (``curve`` is normally the finest). Each flagged grid run is widened by one
    grid step on each side; overlapping intervals are merged.
    """
    curves = list(refinement_curves)
    if curve is not None and all(c is not curve for c in curves):
        curves.append(curve)
    if len(curves) < 2:
        raise ValueError("need at least two refinement levels")
    t = curves[-1].t
    for c in curves:
        if len(c.t) != len(t) or np.any(c.t != t):
            raise ValueError("refinement curves must share the t grid")
    for a, b in zip(curves[:-1], curves[1:]):
        if np.all(np.abs(a.P - b.P) > 10 * a.tol):
            raise InsufficientRefinement("successive levels disagree everywhere")
    fine = curves[-1]
    flags = {
        "kink": _kink_mask(curves),
        "gap_collapse": np.all([np.nan_to_num(c.gap_ratio) >= GAP_COLLAPSE for c in curves], axis=0),
        "freezing": _freezing_mask(t, fine.P, fine.tol),
        "boundary_dominance": np.zeros(len(t), dtype=bool),
    }
    if skew_report is not None:
        flags["boundary_dominance"] = np.array([lab != "interior" for lab in skew_report.labels])
    pieces = []
    for reason in REASONS:
        for i, j in _runs(flags[reason]):
            pieces.append([t[max(i - 1, 0)], t[min(j + 1, len(t) - 1)], {reason}])
    pieces.sort(key=lambda p: p[0])
    merged = []
    for lo, hi, rs in pieces:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
            merged[-1][2] |= rs
        else:
            merged.append([lo, hi, set(rs)])
    candidates = [(float(lo), float(hi), tuple(r for r in REASONS if r in rs)) for lo, hi, rs in merged]
    analytic, start = [], float(t[0])
    for lo, hi, _ in candidates:
        if lo > start:
            analytic.append((start, lo))
        start = max(start, hi)
    if start < t[-1]:
        analytic.append((start, float(t[-1])))
    for c in curves:
        c.transition_candidates = candidates
    return ScanResult(candidates=candidates, analytic_set=analytic, flags=flags)


# ---------------------------------------------------------------------------
# gap onset

@dataclass
class OnsetResult:
    direction: str
    threshold: Optional[float]
    found: bool
    t: np.ndarray
    gap_ratio: np.ndarray


def gap_onset_scan(fmap, phi, direction, scheme, N=None, t_max=8.0, n_points=17, workers=1):
    """Empirical location where the spectral gap opens or closes.

    ``low_temp``: on the geometric grid ``t_max 2^-k`` (both signs), the
    smallest ``|t|`` beyond which the gap ratio stays below 0.99.
    ``high_temp``: on a uniform grid of ``[-t_max, t_max]``, the largest ``t1``
    with gap ratio below 0.99 on all of ``[-t1, t1]``.
    """
    scheme = as_scheme(scheme, N)
    if direction == "low_temp":
        mags = t_max * 2.0 ** -np.arange(n_points - 1, -1, -1, dtype=float)
        t = np.concatenate([-mags[::-1], mags])
        curve = pressure_sweep(fmap, phi, t, scheme, workers=workers)
        ok_pos = curve.gap_ratio[len(mags):] < GAP_COLLAPSE
        ok_neg = curve.gap_ratio[: len(mags)][::-1] < GAP_COLLAPSE
        good = ok_pos & ok_neg
        if not good[-1]:
            return OnsetResult(direction, None, False, t, curve.gap_ratio)
        k = len(good) - 1
        while k > 0 and good[k - 1]:
            k -= 1
        return OnsetResult(direction, float(mags[k]), True, t, curve.gap_ratio)
    if direction == "high_temp":
        half = np.linspace(0.0, t_max, n_points)
        t = np.concatenate([-half[:0:-1], half])
        curve = pressure_sweep(fmap, phi, t, scheme, workers=workers)
        mid = len(half) - 1
        good = np.array([curve.gap_ratio[mid - k] < GAP_COLLAPSE and curve.gap_ratio[mid + k] < GAP_COLLAPSE
                         for k in range(len(half))])
        if not good[0]:
            return OnsetResult(direction, None, False, t, curve.gap_ratio)
        k = 0
        while k + 1 < len(good) and good[k + 1]:
            k += 1
        return OnsetResult(direction, float(half[k]), True, t, curve.gap_ratio)
    raise ValueError("direction must be 'low_temp' or 'high_temp'")
