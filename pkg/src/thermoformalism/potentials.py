"""Potentials, Birkhoff sums and breakpoint flattening."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import CircleMap, SkewProduct, circle_distance, periodic_orbits, reduce_mod1
from .errors import EpsilonTooLarge, UnboundedDerivative

KINDS = ("constant", "trig_poly", "geometric", "fiber_geometric", "custom_grid", "flattened")


class Potential:
    """A real function on the phase space with regularity metadata.

    Parameters
    ----------
    func : callable
        Vectorised evaluator: ``(m,)`` points for circle maps, ``(m, dim)``
        otherwise; returns ``(m,)`` values.
    kind : str
        One of :data:`KINDS`.
    dim : int
    sup_norm : float
        Upper bound for ``|phi|``.
    regularity : str or tuple
        ``"smooth"`` or ``("holder", alpha)``.
    spec : dict, optional
        Config-style description, used for serialization.
    discontinuities : sequence of float, optional
        Circle points where a piecewise potential may jump (1-d only). Hölder
        estimates skip pairs that straddle them.
    """

    def __init__(self, func, *, kind, dim=1, sup_norm, regularity="smooth", spec=None,
                 discontinuities=(), flatten_radius=None, flattened_for=None, inner=None):
        if kind not in KINDS:
            raise ValueError(f"unknown potential kind {kind!r}")
        self._func = func
        self.kind = kind
        self.dim = int(dim)
        self.sup_norm = float(sup_norm)
        self.regularity = regularity
        self.spec = dict(spec or {"kind": kind})
        self.discontinuities = tuple(float(d) for d in discontinuities)
        self.flatten_radius = flatten_radius
        self.flattened_for = flattened_for
        self.inner = inner
        self._holder = None

    def __repr__(self):
        return f"Potential({self.spec})"

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        if self.dim == 1:
            scalar = p.ndim == 0
            out = np.asarray(self._func(np.atleast_1d(p)), dtype=float)
            return float(out[0]) if scalar else out
        single = p.ndim == 1
        out = np.asarray(self._func(p.reshape(-1, self.dim)), dtype=float)
        return float(out[0]) if single else out

    def _derived(self, func, sup_norm, spec):
        return Potential(func, kind=self.kind, dim=self.dim, sup_norm=sup_norm, regularity=self.regularity,
                         spec=spec, discontinuities=self.discontinuities, flatten_radius=self.flatten_radius,
                         flattened_for=self.flattened_for, inner=self.inner)

    def __mul__(self, t):
        t = float(t)
        return self._derived(lambda p: t * self._func(p), abs(t) * self.sup_norm,
                             {"kind": "scaled", "factor": t, "inner": self.spec})

    __rmul__ = __mul__

    def __add__(self, c):
        c = float(c)
        return self._derived(lambda p: self._func(p) + c, self.sup_norm + abs(c),
                             {"kind": "shifted", "shift": c, "inner": self.spec})

    @property
    def holder_exponent(self):
        return 1.0 if self.regularity == "smooth" else float(self.regularity[1])

    def holder_constant(self, n_pairs=10_000, seed=0):
        """Sampled estimate of the Hölder (Lipschitz when smooth) constant."""
        if self._holder is None:
            self._holder = estimate_holder_constant(self, self.holder_exponent, n_pairs=n_pairs, seed=seed)
        return self._holder


def _straddles(a, b, cuts):
    """True where the short circle arc between ``a`` and ``b`` contains a cut."""
    if not cuts:
        return np.zeros(np.shape(a), dtype=bool)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    short_inside = hi - lo <= 0.5
    hit = np.zeros(np.shape(a), dtype=bool)
    for c in cuts:
        inside = (lo < c) & (c <= hi)
        hit |= np.where(short_inside, inside, ~inside | (c == 0.0))
    return hit


def estimate_holder_constant(phi, alpha=1.0, n_pairs=10_000, seed=0):
    """Max of ``|phi(p) - phi(q)| / d(p, q)^alpha`` over random and near pairs."""
    rng = np.random.default_rng(seed)
    d = phi.dim
    p = rng.random((n_pairs, d))
    q = rng.random((n_pairs, d))
    # near pairs resolve local slopes
    base = rng.random((n_pairs, d))
    step = 10.0 ** rng.uniform(-6, -2, size=(n_pairs, 1)) * rng.choice([-1.0, 1.0], size=(n_pairs, d))
    near = reduce_mod1(base + step)
    P = np.concatenate([p, base])
    Q = np.concatenate([q, near])
    dist = np.sqrt(np.sum(circle_distance(P, Q) ** 2, axis=1))
    if d == 1:
        vp, vq = phi(P[:, 0]), phi(Q[:, 0])
        ok = ~_straddles(P[:, 0], Q[:, 0], phi.discontinuities)
    else:
        vp, vq = phi(P), phi(Q)
        ok = np.ones(len(P), dtype=bool)
    ok &= dist > 0
    ratio = np.abs(vp - vq)[ok] / dist[ok] ** alpha
    return float(ratio.max()) if ratio.size else 0.0


def constant(c, dim=1):
    c = float(c)
    return Potential(lambda p: np.full(len(p), c), kind="constant", dim=dim, sup_norm=abs(c),
                     spec={"kind": "constant", "value": c})


def trig_poly(terms, const=0.0, dim=1):
    """``const + sum a cos(2 pi k.x) + b sin(2 pi k.x)`` over ``terms = [(k, a, b), ...]``.

    ``k`` is an integer (dim 1) or an integer vector of length ``dim``.
    """
    ks = [np.atleast_1d(np.asarray(k, dtype=float)) for k, _, _ in terms]
    for k in ks:
        if k.shape != (dim,):
            raise ValueError(f"frequency {k} does not match dim={dim}")
    a = np.array([float(t[1]) for t in terms])
    b = np.array([float(t[2]) for t in terms])
    K = np.array(ks).reshape(len(terms), dim)
    c0 = float(const)

    def f(p):
        x = p.reshape(len(p), dim)
        arg = 2 * np.pi * (x @ K.T)
        return c0 + np.cos(arg) @ a + np.sin(arg) @ b

    spec = {"kind": "trig_poly", "const": c0,
            "terms": [[k.astype(int).tolist() if dim > 1 else int(k[0]), float(ai), float(bi)]
                      for k, ai, bi in zip(ks, a, b)]}
    bound = abs(c0) + float(np.sum(np.hypot(a, b)))
    return Potential(f, kind="trig_poly", dim=dim, sup_norm=bound, spec=spec)


def cosine(amplitude=1.0, freq=1):
    """``amplitude * cos(2 pi freq x)`` on the circle."""
    return trig_poly([(freq, amplitude, 0.0)])


def geometric_potential(fmap, scope="full"):
    """``-log|T'|`` (scope ``"full"``) or ``-log|d_y f_x(y)|`` (scope ``"fiber"``)."""
    if scope == "fiber":
        if not isinstance(fmap, SkewProduct):
            raise ValueError("fiber scope needs a skew product")
        grid = np.random.default_rng(0).random((20000, fmap.dim))
        vals = fmap.log_fiber_derivative(grid)
        if not np.all(np.isfinite(vals)):
            raise UnboundedDerivative("fibre derivative is not finite on the sample grid")
        bound = float(np.max(np.abs(vals))) * 1.05
        return Potential(lambda p: -fmap.log_fiber_derivative(p), kind="fiber_geometric", dim=fmap.dim,
                         sup_norm=bound, spec={"kind": "fiber_geometric"})
    if scope != "full":
        raise ValueError("scope must be 'full' or 'fiber'")
    if isinstance(fmap, CircleMap):
        lo, hi = fmap.derivative_bounds()
        if not (np.isfinite(hi) and lo > 0):
            raise UnboundedDerivative(f"derivative of {fmap!r} is unbounded or vanishes")
        bound = max(abs(np.log(lo)), abs(np.log(hi)))
        alpha = fmap.params.get("alpha")
        regularity = ("holder", min(1.0, float(alpha))) if alpha is not None and alpha < 1 else "smooth"
        # branch ends where the slope can jump
        cuts = tuple(b.start for b in fmap.branches) + tuple(b.end % 1.0 for b in fmap.branches)
        return Potential(lambda p: -np.log(np.abs(fmap.derivative(p))), kind="geometric", dim=1,
                         sup_norm=bound, regularity=regularity, spec={"kind": "geometric"},
                         discontinuities=sorted(set(cuts)))
    # linear torus map: minus log |det A|
    val = -float(np.log(abs(np.linalg.det(fmap.A))))
    return Potential(lambda p: np.full(len(p), val), kind="geometric", dim=fmap.dim, sup_norm=abs(val),
                     spec={"kind": "geometric"})


def custom_grid(values, dim=1):
    """Periodic multilinear interpolation of samples on the uniform grid ``i/n``."""
    V = np.asarray(values, dtype=float)
    if V.ndim != dim:
        raise ValueError("values must have one axis per dimension")
    shape = np.array(V.shape)

    def f(p):
        x = reduce_mod1(p.reshape(len(p), dim)) * shape
        i0 = np.floor(x).astype(np.int64)
        frac = x - i0
        out = np.zeros(len(p))
        for corner in itertools.product((0, 1), repeat=dim):
            c = np.array(corner)
            idx = tuple(((i0[:, a] + c[a]) % shape[a]) for a in range(dim))
            w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            out += w * V[idx]
        return out

    return Potential(f, kind="custom_grid", dim=dim, sup_norm=float(np.max(np.abs(V))),
                     regularity=("holder", 1.0),
                     spec={"kind": "custom_grid", "values": V.tolist()})


def birkhoff_sum(phi, fmap, p, n):
    """``sum_{j<n} phi(f^j p)``; vectorised over points."""
    if n < 0:
        raise ValueError("n >= 0")
    q = np.asarray(p, dtype=float)
    total = np.zeros(np.shape(phi(q))) if n > 0 else 0.0 * np.asarray(phi(q))
    for _ in range(n):
        total = total + phi(q)
        q = fmap.eval(q)
    return float(total) if np.ndim(total) == 0 else total


def smooth_step(u):
    """C-infinity step: 0 for ``u <= 0``, 1 for ``u >= 1``."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def _min_circle_gap(points):
    pts = np.sort(reduce_mod1(np.asarray(points, dtype=float)))
    if len(pts) < 2:
        return 1.0
    gaps = np.diff(np.concatenate([pts, [pts[0] + 1.0]]))
    return float(gaps.min())


def _nearest_lift(a, y):
    """Representative ``a + k`` of a circle point closest to ``y`` in [0, 1] coordinates.

    Anchoring at the lift keeps one-sided limits for potentials that are not
    periodic, and ``a + k`` depends only on the side, so plateaus stay exact.
    """
    return a + np.round(y - a)


def _plateau_weight(dist, eps, outer):
    """1 inside ``eps``, 0 beyond ``outer``, smooth in between."""
    if outer <= eps:
        return np.where(dist < eps, 1.0, 0.0)
    beta = 1.0 - smooth_step((dist - eps) / (outer - eps))
    return np.where(dist < eps, 1.0, np.where(dist >= outer, 0.0, beta))


def flatten(phi, eps, fmap):
    """Make ``phi`` exactly constant near the breakpoints of ``fmap``.

    For a skew product, ``phi(x, y)`` is replaced by ``phi(x, a_j(x))`` when
    ``y`` is within ``eps`` of a fibre breakpoint ``a_j(x)``; then, for an
    intermittent base, by the fibre-flattened value at ``(x_i, y)`` when ``x``
    is within ``eps`` of a base breakpoint ``x_i`` (base wins at corners).
    Outside the plateaus the potential blends back to ``phi`` by a smooth step
    that reaches ``phi`` at distance ``min(2 eps, gap / 2)``. For a circle map
    the same construction is applied at its breakpoints.

    Raises
    ------
    EpsilonTooLarge
        If ``2 eps`` exceeds the smallest gap between breakpoints, so that the
        open plateaus would overlap.
    """
    eps = float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if phi.flatten_radius is not None and phi.flattened_for is fmap and phi.flatten_radius >= eps:
        return phi

    if isinstance(fmap, SkewProduct):
        fam = fmap.family
        fiber_gap = _min_circle_gap(fam.profile.breakpoints)
        base_bp = np.asarray(fmap.base_breakpoints, dtype=float)
        base_gap = _min_circle_gap(base_bp) if len(base_bp) else 1.0
        gap = min(fiber_gap, base_gap)
        if 2 * eps > gap + 1e-15:
            raise EpsilonTooLarge(f"2*eps = {2 * eps} exceeds breakpoint gap {gap}")
        fiber_outer = min(2 * eps, fiber_gap / 2)
        base_outer = min(2 * eps, base_gap / 2)
        bd = fmap.base_dim

        def fiber_flat(P):
            x0 = P[:, 0]
            y = P[:, -1]
            alphas = fam.breakpoints(x0)
            dist = circle_distance(y[:, None], alphas)
            j = np.argmin(dist, axis=1)
            dmin = dist[np.arange(len(y)), j]
            anchor = P.copy()
            anchor[:, -1] = _nearest_lift(alphas[np.arange(len(y)), j], y)
            beta = _plateau_weight(dmin, eps, fiber_outer)
            v_anchor = phi(anchor)
            v = phi(P)
            return np.where(beta == 1.0, v_anchor, np.where(beta == 0.0, v, beta * v_anchor + (1 - beta) * v))

        def f(P):
            out = fiber_flat(P)
            if len(base_bp) == 0 or bd != 1:
                return out
            x = P[:, 0]
            dist = circle_distance(x[:, None], base_bp[None, :])
            i = np.argmin(dist, axis=1)
            dmin = dist[np.arange(len(x)), i]
            anchor = P.copy()
            anchor[:, 0] = _nearest_lift(base_bp[i], x)
            beta = _plateau_weight(dmin, eps, base_outer)
            v_anchor = fiber_flat(anchor)
            return np.where(beta == 1.0, v_anchor, np.where(beta == 0.0, out, beta * v_anchor + (1 - beta) * out))

        dim = fmap.dim
    elif isinstance(fmap, CircleMap):
        bps = fmap.breakpoints
        gap = _min_circle_gap(bps)
        if 2 * eps > gap + 1e-15:
            raise EpsilonTooLarge(f"2*eps = {2 * eps} exceeds breakpoint gap {gap}")
        outer = min(2 * eps, gap / 2)

        def f(x):
            dist = circle_distance(x[:, None], bps[None, :])
            i = np.argmin(dist, axis=1)
            dmin = dist[np.arange(len(x)), i]
            beta = _plateau_weight(dmin, eps, outer)
            v_anchor = phi(_nearest_lift(bps[i], x))
            v = phi(x)
            return np.where(beta == 1.0, v_anchor, np.where(beta == 0.0, v, beta * v_anchor + (1 - beta) * v))

        dim = 1
    else:
        raise TypeError("flatten needs a skew product or a circle map")

    spec = {"kind": "flattened", "eps": eps, "inner": phi.spec}
    return Potential(f, kind="flattened", dim=dim, sup_norm=phi.sup_norm, regularity=phi.regularity,
                     spec=spec, flatten_radius=eps, flattened_for=fmap, inner=phi)


def flatten_deviation(phi, eps, fmap, n=200):
    """Sup of ``|flatten(phi, eps) - phi|`` on an ``n``-per-axis grid plus near-breakpoint samples."""
    flat = flatten(phi, eps, fmap)
    u = (np.arange(n) + 0.5) / n
    if fmap.dim == 1:
        pts = np.concatenate([u, reduce_mod1(fmap.breakpoints[:, None] + np.linspace(-2 * eps, 2 * eps, 101)[None, :]).ravel()])
    else:
        grids = np.meshgrid(*([u] * fmap.dim), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        xs = u
        offs = np.linspace(-2 * eps, 2 * eps, 101)
        near = []
        for x in xs:
            a = fmap.family.breakpoints(np.array([x]))[0]
            ys = reduce_mod1((a[:, None] + offs[None, :]).ravel())
            blk = np.zeros((len(ys), fmap.dim))
            blk[:, :-1] = x
            blk[:, -1] = ys
            near.append(blk)
        pts = np.concatenate([pts] + near)
    return float(np.max(np.abs(flat(pts) - phi(pts))))


@dataclass
class CohomologyResult:
    """Outcome of the periodic-orbit coboundary test.

    ``likely_coboundary`` carries ``constant``; otherwise ``witnesses`` holds two
    ``(orbit_points, average)`` pairs with distinct averages.
    """

    likely_coboundary: bool
    constant: Optional[float] = None
    witnesses: tuple = ()
    spread: float = 0.0


def cohomology_to_constant_test(phi, fmap, max_period, threshold=1e-8):
    """Compare periodic-orbit averages of ``phi`` up to ``max_period``."""
    best = []
    for n in range(1, max_period + 1):
        orbits, _ = periodic_orbits(fmap, n)
        m = orbits.shape[0]
        flat = orbits.reshape(m * n, -1) if fmap.dim > 1 else orbits.reshape(-1)
        avgs = phi(flat).reshape(m, n).mean(axis=1)
        lo, hi = int(np.argmin(avgs)), int(np.argmax(avgs))
        best.append((avgs[lo], orbits[lo]))
        best.append((avgs[hi], orbits[hi]))
    vals = np.array([b[0] for b in best])
    lo, hi = int(np.argmin(vals)), int(np.argmax(vals))
    spread = float(vals[hi] - vals[lo])
    if spread > threshold:
        return CohomologyResult(False, witnesses=((best[lo][1], float(vals[lo])), (best[hi][1], float(vals[hi]))),
                                spread=spread)
    return CohomologyResult(True, constant=float(np.mean(vals)), spread=spread)


def coboundary(u, fmap, const=0.0):
    """``const + u o f - u`` for a potential ``u`` (handy for testing)."""
    c = float(const)
    return Potential(lambda p: c + u(fmap.eval(p)) - u(p), kind=u.kind if u.kind != "flattened" else "custom_grid",
                     dim=u.dim, sup_norm=abs(c) + 2 * u.sup_norm, regularity=u.regularity,
                     spec={"kind": u.kind, "coboundary_of": u.spec, "const": c})
