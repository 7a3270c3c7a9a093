"""Map families: full-branch circle maps, linear torus endomorphisms and skew products.

Every map exposes the same small surface used by the rest of the package:

* ``dim`` and ``degree``
* ``eval(points)`` (forward map, coordinates reduced mod 1)
* ``inverse_branch(j, points)`` and ``preimages(points)``
* ``log_conorm(points)`` (log of the smallest singular value of the derivative)
* ``neutral_points`` (empty for uniformly expanding maps)

Circle maps take points as 1-d arrays; torus maps and skew products take
arrays of shape ``(m, dim)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import BranchSolveFailure, BudgetExceeded, NotExpanding

DEFAULT_NODE_BUDGET = 2**24
SOLVE_TOL = 1e-14


def reduce_mod1(x):
    """Canonical representative in [0, 1)."""
    r = np.mod(x, 1.0)
    return np.where(r >= 1.0, 0.0, r)


def circle_distance(a, b):
    d = np.abs(reduce_mod1(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    return np.minimum(d, 1.0 - d)


def solve_monotone(f, df, target, lo, hi, tol=SOLVE_TOL, max_iter=200):
    """Solve ``f(x) = target`` for increasing ``f`` on ``[lo, hi]``, elementwise.

    Bracketed bisection with Newton steps accepted only when they stay inside
    the current bracket.
    """
    target = np.asarray(target, dtype=float)
    a = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    b = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    fa = f(a) - target
    fb = f(b) - target
    slack = 1e-13
    if np.any(fa > slack) or np.any(fb < -slack):
        raise BranchSolveFailure("branch does not bracket the target value")
    x = np.where(fb - fa > 0, a + (b - a) * np.clip(-fa / np.where(fb - fa > 0, fb - fa, 1.0), 0.0, 1.0), 0.5 * (a + b))
    done = np.zeros(target.shape, dtype=bool)
    for _ in range(max_iter):
        fx = f(x) - target
        done = (np.abs(fx) <= tol) | (b - a <= 4e-16 * np.maximum(1.0, np.abs(x)))
        if done.all():
            return x
        neg = fx < 0
        a = np.where(neg, x, a)
        b = np.where(neg, b, x)
        d = df(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - fx / d
        bad = ~np.isfinite(xn) | (xn <= a) | (xn >= b)
        xn = np.where(bad, 0.5 * (a + b), xn)
        x = np.where(done, x, xn)
    fx = f(x) - target
    if np.any(np.abs(fx) > 1e-12):
        raise BranchSolveFailure(f"monotone solve did not converge (max residual {np.max(np.abs(fx)):.3e})")
    return x


class Branch(NamedTuple):
    """One full branch ``T_j : [start, end) -> [0, 1)`` (increasing, onto)."""

    start: float
    end: float
    forward: Callable
    derivative: Callable
    inverse: Optional[Callable] = None


class CircleMap:
    """Full-branch map of [0, 1) with increasing branches.

    If the branch domains tile [0, 1) the map is a circle map of degree
    ``len(branches)``. If they leave a gap (``is_circle`` false), the map is a
    cookie-cutter: the transfer operator only sums over the branch inverses and
    points in the gap escape. ``eval`` on a gap point extends the nearest branch
    to its left.
    """

    dim = 1

    def __init__(self, branches: Sequence[Branch], *, neutral_points=(), repeller=None,
                 name="circle_map", params=None):
        if not branches:
            raise ValueError("need at least one branch")
        starts = np.array([b.start for b in branches], dtype=float)
        if np.any(np.diff(starts) <= 0):
            raise ValueError("branch starts must be increasing")
        for b, nxt in zip(branches[:-1], branches[1:]):
            if b.end > nxt.start + 1e-15:
                raise ValueError("branch domains overlap")
        self.branches = tuple(branches)
        self._starts = starts
        self.neutral_points = tuple(float(p) for p in neutral_points)
        self.name = name
        self.params = dict(params or {})
        tiles = abs(starts[0]) < 1e-15 and abs(branches[-1].end - 1.0) < 1e-15 and all(
            abs(b.end - n.start) < 1e-15 for b, n in zip(branches[:-1], branches[1:]))
        self.is_circle = bool(tiles)
        self._repeller = repeller

    def __repr__(self):
        return f"CircleMap({self.name}, degree={self.degree})"

    @property
    def degree(self):
        return len(self.branches)

    @property
    def breakpoints(self):
        return self._starts.copy()

    @property
    def smooth_on_circle(self):
        """True when the branches join into a C^1 covering of the circle."""
        if not self.is_circle:
            return False
        for b, nxt in zip(self.branches, self.branches[1:] + self.branches[:1]):
            d_left = float(b.derivative(np.array([b.end]))[0])
            d_right = float(nxt.derivative(np.array([nxt.start]))[0])
            if abs(d_left - d_right) > 1e-9 * max(1.0, abs(d_left)):
                return False
        return True

    @property
    def repeller(self):
        if self._repeller is None:
            self._repeller = (0.0, 1) if self.is_fixed(0.0) else None
        return self._repeller

    def is_fixed(self, x, tol=1e-12):
        return bool(circle_distance(self.eval(x), x) < tol)

    def branch_index(self, x):
        x = reduce_mod1(np.asarray(x, dtype=float))
        return np.clip(np.searchsorted(self._starts, x, side="right") - 1, 0, self.degree - 1)

    def _apply_branchwise(self, x, attr):
        x = reduce_mod1(np.asarray(x, dtype=float))
        idx = self.branch_index(x)
        out = np.empty_like(x)
        for j, br in enumerate(self.branches):
            m = idx == j
            if np.any(m):
                out[m] = getattr(br, attr)(x[m])
        return out

    def eval(self, x):
        scalar = np.ndim(x) == 0
        out = reduce_mod1(self._apply_branchwise(np.atleast_1d(x), "forward"))
        return float(out[0]) if scalar else out

    def lift(self, x):
        """``T_j(x) + j`` on branch ``j``: a monotone lift for circle maps."""
        x = np.atleast_1d(reduce_mod1(np.asarray(x, dtype=float)))
        return self._apply_branchwise(x, "forward") + self.branch_index(x)

    def derivative(self, x):
        scalar = np.ndim(x) == 0
        out = self._apply_branchwise(np.atleast_1d(x), "derivative")
        return float(out[0]) if scalar else out

    def log_conorm(self, x):
        return np.log(np.abs(self.derivative(x)))

    def inverse_raw(self, j, p):
        """Inverse of branch ``j`` at unreduced targets ``p`` in [0, 1]."""
        br = self.branches[j]
        p = np.asarray(p, dtype=float)
        if br.inverse is not None:
            return br.inverse(p)
        return solve_monotone(br.forward, br.derivative, p, br.start, br.end)

    def inverse_branch(self, j, p):
        """Point of branch ``j`` (0-based) mapped to ``p``."""
        scalar = np.ndim(p) == 0
        x = self.inverse_raw(j, reduce_mod1(np.atleast_1d(np.asarray(p, dtype=float))))
        br = self.branches[j]
        x = np.clip(x, br.start, np.nextafter(br.end, -np.inf))
        return float(x[0]) if scalar else x

    def inverse_branches(self, js, p):
        """Vectorised inverse with a per-point branch index."""
        js = np.asarray(js)
        p = np.asarray(p, dtype=float)
        out = np.empty_like(p)
        for j in np.unique(js):
            m = js == j
            out[m] = self.inverse_branch(int(j), p[m])
        return out

    def preimages(self, p):
        """Array of shape ``(m, degree)`` (or ``(degree,)`` for a scalar)."""
        scalar = np.ndim(p) == 0
        p = np.atleast_1d(np.asarray(p, dtype=float))
        out = np.stack([self.inverse_branch(j, p) for j in range(self.degree)], axis=-1)
        return out[0] if scalar else out

    def derivative_bounds(self, samples=20001):
        x = np.linspace(0.0, 1.0, samples, endpoint=False)
        ends = np.array([b.start for b in self.branches] + [np.nextafter(b.end, 0) for b in self.branches])
        d = np.abs(self.derivative(np.concatenate([x, ends])))
        return float(d.min()), float(d.max())


def _linear_branch(start, slope, offset=0.0):
    end = start + 1.0 / slope
    return Branch(
        start=start,
        end=end,
        forward=lambda x, s=start, k=slope: k * (x - s),
        derivative=lambda x, k=slope: np.full_like(np.asarray(x, dtype=float), k),
        inverse=lambda p, s=start, k=slope: s + p / k,
    )


def doubling():
    m = piecewise_linear([2.0, 2.0])
    m.name = "doubling"
    m.params = {"kind": "doubling"}
    return m


def piecewise_linear(slopes, name=None):
    """Full-branch piecewise-linear map; branch ``j`` has length ``1/slopes[j]``.

    When the lengths sum to less than one the map is a cookie-cutter on [0, 1).
    """
    slopes = [float(s) for s in slopes]
    if any(s <= 1.0 for s in slopes):
        raise ValueError("slopes must exceed 1")
    if sum(1.0 / s for s in slopes) > 1.0 + 1e-12:
        raise ValueError("branch domains 1/slope overlap")
    branches, start = [], 0.0
    for s in slopes:
        branches.append(_linear_branch(start, s))
        start += 1.0 / s
    if abs(start - 1.0) < 1e-12:
        last = branches[-1]
        branches[-1] = last._replace(end=1.0)
    m = CircleMap(branches, name=name or f"piecewise_linear{tuple(slopes)}",
                  params={"kind": "piecewise_linear", "slopes": slopes})
    m._repeller = (0.0, 1)
    return m


def manneville_pomeau(alpha):
    """``T(x) = x + x^(1+alpha) mod 1`` with a neutral fixed point at 0."""
    a = float(alpha)
    if a <= 0:
        raise ValueError("alpha must be positive")
    lift = lambda x: x + np.power(x, 1.0 + a)
    dlift = lambda x: 1.0 + (1.0 + a) * np.power(x, a)
    c = float(solve_monotone(lift, dlift, np.array([1.0]), 0.0, 1.0)[0])
    branches = [
        Branch(0.0, c, lift, dlift),
        Branch(c, 1.0, lambda x: lift(x) - 1.0, dlift),
    ]
    m = CircleMap(branches, neutral_points=(0.0,), name=f"manneville_pomeau({a})",
                  params={"kind": "manneville_pomeau", "alpha": a})
    p = periodic_point(m, (0, 1))
    m._repeller = (float(p[0]), 2)
    return m


def perturbed_doubling(eps):
    """Analytic expanding circle map ``2x + eps sin(2 pi x) / (2 pi)``."""
    e = float(eps)
    if abs(e) >= 1.0:
        raise ValueError("|eps| < 1 keeps the map expanding")
    lift = lambda x: 2.0 * x + e * np.sin(2 * np.pi * x) / (2 * np.pi)
    dlift = lambda x: 2.0 + e * np.cos(2 * np.pi * x)
    branches = [
        Branch(0.0, 0.5, lift, dlift),
        Branch(0.5, 1.0, lambda x: lift(x) - 1.0, dlift),
    ]
    m = CircleMap(branches, name=f"analytic_perturbed_doubling({e})",
                  params={"kind": "analytic_perturbed_doubling", "eps": e})
    m._repeller = (0.0, 1)
    return m


def smooth_intermittent(a=1.0):
    """Analytic degree-2 circle map ``2y - a sin(2 pi y) / (2 pi)``.

    For ``a = 1`` the fixed point 0 is neutral from both sides (cubic
    tangency) and the breakpoints are exactly ``{0, 1/2}``.
    """
    a = float(a)
    if not 0.0 <= a <= 1.0:
        raise ValueError("a must lie in [0, 1]")
    lift = lambda x: 2.0 * x - a * np.sin(2 * np.pi * x) / (2 * np.pi)
    dlift = lambda x: 2.0 - a * np.cos(2 * np.pi * x)
    branches = [
        Branch(0.0, 0.5, lift, dlift),
        Branch(0.5, 1.0, lambda x: lift(x) - 1.0, dlift),
    ]
    neutral = (0.0,) if a == 1.0 else ()
    m = CircleMap(branches, neutral_points=neutral, name=f"smooth_intermittent({a})",
                  params={"kind": "smooth_intermittent", "a": a})
    p = periodic_point(m, (0, 1))
    m._repeller = (float(p[0]), 2)
    return m


class TorusEndomorphism:
    """Linear expanding endomorphism ``x -> A x mod 1`` of the d-torus."""

    neutral_points = ()

    def __init__(self, matrix):
        A = np.atleast_2d(np.asarray(matrix))
        if A.shape[0] != A.shape[1] or not np.all(A == np.round(A)):
            raise ValueError("matrix must be square with integer entries")
        self.A = A.astype(float)
        self.dim = A.shape[0]
        ev = np.abs(np.linalg.eigvals(self.A))
        if np.any(ev <= 1.0):
            raise ValueError("all eigenvalue moduli must exceed 1")
        self.degree = int(round(abs(np.linalg.det(self.A))))
        self.Ainv = np.linalg.inv(self.A)
        self._cosets = self._coset_representatives()
        self.name = f"torus_linear({A.astype(int).tolist()})"
        self.params = {"kind": "torus_linear", "matrix": A.astype(int).tolist()}
        self.repeller = (np.zeros(self.dim), 1)
        self._log_conorm = float(np.log(np.linalg.svd(self.A, compute_uv=False).min()))

    def __repr__(self):
        return f"TorusEndomorphism({self.A.astype(int).tolist()})"

    def _coset_representatives(self):
        n = self.degree
        reps = {}
        for k in itertools.product(range(n), repeat=self.dim):
            y = reduce_mod1(self.Ainv @ np.array(k, dtype=float))
            key = tuple(np.round(y * n).astype(int) % n)
            reps.setdefault(key, np.array(k, dtype=float))
            if len(reps) == n:
                break
        if len(reps) != n:
            raise ValueError("could not enumerate preimage branches")
        return np.array([reps[key] for key in sorted(reps)])

    def _points(self, p):
        p = np.asarray(p, dtype=float)
        return p.reshape(-1, self.dim), p.ndim == 1

    def eval(self, p):
        q, single = self._points(p)
        out = reduce_mod1(q @ self.A.T)
        return out[0] if single else out

    def inverse_branch(self, j, p):
        q, single = self._points(p)
        out = reduce_mod1((q + self._cosets[j]) @ self.Ainv.T)
        return out[0] if single else out

    def inverse_branches(self, js, p):
        q, _ = self._points(p)
        return reduce_mod1((q + self._cosets[np.asarray(js)]) @ self.Ainv.T)

    def preimages(self, p):
        q, single = self._points(p)
        out = np.stack([self.inverse_branch(j, q) for j in range(self.degree)], axis=1)
        return out[0] if single else out

    def derivative(self, p):
        q, single = self._points(p)
        D = np.broadcast_to(self.A, (q.shape[0], self.dim, self.dim))
        return D[0] if single else D

    def log_conorm(self, p):
        q, single = self._points(p)
        out = np.full(q.shape[0], self._log_conorm)
        return out[0] if single else out

    def as_circle_map(self):
        if self.dim != 1 or self.A[0, 0] < 2:
            raise ValueError("only orientation-preserving 1-d endomorphisms convert")
        m = piecewise_linear([self.A[0, 0]] * int(self.A[0, 0]))
        m.name = self.name
        return m


def _smooth_sin_terms(s):
    """Perturbation ``q(s) = sin^2(pi s) sin(2 pi s) / (2 pi)`` and its derivative."""
    q = np.sin(np.pi * s) ** 2 * np.sin(2 * np.pi * s) / (2 * np.pi)
    dq = 0.5 * np.sin(2 * np.pi * s) ** 2 + np.sin(np.pi * s) ** 2 * np.cos(2 * np.pi * s)
    return q, dq


class FiberFamily:
    """Fibre maps ``f_x(y) = R_r(x) h_k(x)(profile(R_-r(x) y))``.

    ``R_r`` is the rotation by ``r(x) = rotation * sin(2 pi x_0)``;
    ``h_k(s) = s + k q(s)`` with ``k(x) = perturbation * sin(2 pi x_0)`` fixes the
    integers with derivative 1 there, so breakpoints and neutral points of the
    profile are preserved. Rotation makes the breakpoints x-dependent (class
    TM1); without it they are constant (TM2/TM3).
    """

    def __init__(self, profile: CircleMap, rotation=0.0, perturbation=0.0):
        if not profile.is_circle:
            raise ValueError("fibre profile must be a circle map")
        if abs(float(perturbation)) > 0.25:
            raise ValueError("|perturbation| <= 0.25 keeps the fibres expanding")
        self.profile = profile
        self.rotation = float(rotation)
        self.perturbation = float(perturbation)
        self.degree = profile.degree

    @property
    def constant_breakpoints(self):
        return self.rotation == 0.0

    def r(self, x0):
        return self.rotation * np.sin(2 * np.pi * x0)

    def dr(self, x0):
        return 2 * np.pi * self.rotation * np.cos(2 * np.pi * x0)

    def kappa(self, x0):
        return self.perturbation * np.sin(2 * np.pi * x0)

    def dkappa(self, x0):
        return 2 * np.pi * self.perturbation * np.cos(2 * np.pi * x0)

    def breakpoints(self, x0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return reduce_mod1(self.profile.breakpoints[None, :] + self.r(x0)[:, None])

    def neutral_points(self, x0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        base = np.array(self.profile.neutral_points, dtype=float)
        return reduce_mod1(base[None, :] + self.r(x0)[:, None])

    def _parts(self, x0, y):
        u = reduce_mod1(y - self.r(x0))
        s = self.profile.lift(u)
        q, dq = _smooth_sin_terms(s)
        k = self.kappa(x0)
        return u, s, q, dq, k

    def eval(self, x0, y):
        u, s, q, dq, k = self._parts(x0, y)
        return reduce_mod1(s + k * q + self.r(x0))

    def dy(self, x0, y):
        u, s, q, dq, k = self._parts(x0, y)
        return (1.0 + k * dq) * self.profile.derivative(u)

    def dx(self, x0, y):
        u, s, q, dq, k = self._parts(x0, y)
        dyv = (1.0 + k * dq) * self.profile.derivative(u)
        return self.dr(x0) * (1.0 - dyv) + q * self.dkappa(x0)

    def inverse(self, j, x0, p):
        x0 = np.asarray(x0, dtype=float)
        p = np.asarray(p, dtype=float)
        v = reduce_mod1(p - self.r(x0)) + j
        k = np.broadcast_to(self.kappa(x0), v.shape)
        if np.any(k != 0):
            f = lambda s: s + k * _smooth_sin_terms(s)[0]
            df = lambda s: 1.0 + k * _smooth_sin_terms(s)[1]
            s = solve_monotone(f, df, v, float(j), float(j + 1))
        else:
            s = v
        u = self.profile.inverse_raw(j, s - j)
        return reduce_mod1(u + self.r(x0))

    def fiber_map(self, x0):
        """The fibre map at a fixed base point, as a :class:`CircleMap`."""
        if not self.constant_breakpoints:
            raise ValueError("fibre maps are extracted only for constant breakpoints")
        k0 = float(self.kappa(x0))
        prof = self.profile
        branches = []
        for j, br in enumerate(prof.branches):
            def fwd(x, j=j, br=br):
                s = br.forward(x) + j
                return s + k0 * _smooth_sin_terms(s)[0] - j

            def der(x, j=j, br=br):
                s = br.forward(x) + j
                return (1.0 + k0 * _smooth_sin_terms(s)[1]) * br.derivative(x)

            branches.append(Branch(br.start, br.end, fwd, der))
        m = CircleMap(branches, neutral_points=prof.neutral_points, name=f"fiber({prof.name}, x={float(x0):.6g})")
        return m


class SkewProduct:
    """``F(x, y) = (g(x), f_x(y))`` on ``T^d x S^1``; points have shape ``(m, d + 1)``."""

    def __init__(self, base, family: FiberFamily, name="skew_product"):
        if isinstance(base, TorusEndomorphism) and base.dim == 1:
            base = base.as_circle_map()
        if isinstance(base, CircleMap) and not base.is_circle:
            raise ValueError("skew-product base must be a circle map")
        self.base = base
        self.family = family
        self.base_dim = base.dim
        self.dim = base.dim + 1
        self.degree = base.degree * family.degree
        self.name = name
        base_intermittent = bool(base.neutral_points)
        if not family.constant_breakpoints:
            self.class_tag = "TM1"
        else:
            self.class_tag = "TM3" if base_intermittent else "TM2"
        self.neutral_points = tuple(family.profile.neutral_points) + tuple(base.neutral_points)

    def __repr__(self):
        return f"SkewProduct({self.base!r}, {self.family.profile.name}, {self.class_tag})"

    @property
    def base_breakpoints(self):
        if isinstance(self.base, CircleMap) and self.base.neutral_points:
            return self.base.breakpoints
        return np.array([])

    def _split(self, p):
        p = np.asarray(p, dtype=float)
        q = p.reshape(-1, self.dim)
        x = q[:, 0] if self.base_dim == 1 else q[:, : self.base_dim]
        return q, x, q[:, -1], p.ndim == 1

    def _x0(self, x):
        return x if np.ndim(x) == 1 else x[:, 0]

    def _join(self, x, y, single):
        out = np.column_stack([x.reshape(len(y), -1), y])
        return out[0] if single else out

    def eval(self, p):
        q, x, y, single = self._split(p)
        return self._join(self.base.eval(x), self.family.eval(self._x0(x), y), single)

    def inverse_branch(self, j, p):
        q, x, y, single = self._split(p)
        jb, jf = divmod(int(j), self.family.degree)
        xb = self.base.inverse_branch(jb, x)
        yf = self.family.inverse(jf, self._x0(xb), y)
        return self._join(xb, yf, single)

    def inverse_branches(self, js, p):
        q, _, _, _ = self._split(p)
        js = np.asarray(js)
        out = np.empty_like(q)
        for j in np.unique(js):
            m = js == j
            out[m] = self.inverse_branch(int(j), q[m])
        return out

    def preimages(self, p):
        q, x, y, single = self._split(p)
        out = np.stack([self.inverse_branch(j, q) for j in range(self.degree)], axis=1)
        return out[0] if single else out

    def derivative(self, p):
        q, x, y, single = self._split(p)
        m, d = q.shape[0], self.base_dim
        D = np.zeros((m, d + 1, d + 1))
        if d == 1:
            D[:, 0, 0] = self.base.derivative(x)
        else:
            D[:, :d, :d] = self.base.A
        x0 = self._x0(x)
        D[:, d, 0] = self.family.dx(x0, y)
        D[:, d, d] = self.family.dy(x0, y)
        return D[0] if single else D

    def log_conorm(self, p):
        D = np.atleast_3d(self.derivative(np.asarray(p, dtype=float).reshape(-1, self.dim)))
        s = np.linalg.svd(D, compute_uv=False)
        out = np.log(s[:, -1])
        return out[0] if np.ndim(p) == 1 else out

    def log_fiber_derivative(self, p):
        q, x, y, single = self._split(p)
        out = np.log(np.abs(self.family.dy(self._x0(x), y)))
        return out[0] if single else out

    def log_base_conorm(self, p):
        q, x, y, single = self._split(p)
        out = np.atleast_1d(self.base.log_conorm(x)) * np.ones(q.shape[0])
        return out[0] if single else out


def is_expanding(fmap):
    return not fmap.neutral_points


def _reshape_points(fmap, p):
    p = np.asarray(p, dtype=float)
    if fmap.dim == 1:
        return np.atleast_1d(p)
    return p.reshape(-1, fmap.dim)


@dataclass
class PreimageTree:
    """Depth-``n`` inverse orbits of a root point, in lexicographic branch-word order.

    ``weights[i]`` is the Birkhoff sum ``S_n phi`` at ``leaves[i]``.
    """

    root: np.ndarray
    depth: int
    degree: int
    leaves: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)

    def words(self):
        """Branch words, first letter = branch chosen at the root."""
        idx = np.arange(len(self.weights))
        out = np.empty((len(idx), self.depth), dtype=np.int64)
        for k in range(self.depth - 1, -1, -1):
            idx, out[:, k] = np.divmod(idx, self.degree)
        return out


def preimage_tree(fmap, phi, root, n, budget=DEFAULT_NODE_BUDGET):
    """Enumerate ``f^-n(root)`` with accumulated Birkhoff weights of ``phi``."""
    if fmap.degree ** n > budget:
        raise BudgetExceeded(f"degree^n = {fmap.degree}^{n} exceeds budget {budget}")
    pts = _reshape_points(fmap, root)
    if len(pts) != 1:
        raise ValueError("root must be a single point")
    w = np.zeros(1)
    for _ in range(n):
        pre = fmap.preimages(pts)
        if fmap.dim == 1:
            pts = pre.reshape(-1)
        else:
            pts = pre.reshape(-1, fmap.dim)
        w = np.repeat(w, fmap.degree) + phi(pts)
    return PreimageTree(root=np.asarray(root, dtype=float), depth=n, degree=fmap.degree, leaves=pts, weights=w)


def periodic_point(fmap, word, tol=1e-13, max_sweeps=200):
    """Point ``x`` with ``f^k(x)`` in branch ``word[k]`` and ``f^len(word)(x) = x``."""
    orbits = periodic_orbits_for_words(fmap, np.atleast_2d(np.asarray(word)), tol=tol, max_sweeps=max_sweeps)
    return orbits[0]


def periodic_orbits_for_words(fmap, words, tol=1e-13, max_sweeps=200):
    """Orbits (shape ``(W, n[, dim])``) of the periodic points coded by ``words``.

    Each point is the fixed point of the inverse-branch composition along the
    reversed word, found by iteration.
    """
    words = np.asarray(words, dtype=np.int64)
    W, n = words.shape
    if fmap.dim == 1:
        x = np.full(W, 0.5)
    else:
        x = np.full((W, fmap.dim), 0.5)
    orbit = None
    extra = None
    for _ in range(max_sweeps):
        z = x
        orbit = [None] * n
        for k in range(n - 1, -1, -1):
            z = fmap.inverse_branches(words[:, k], z)
            orbit[k] = z
        delta = circle_distance(orbit[0], x)
        x = orbit[0]
        if extra is not None:
            extra -= 1
            if extra == 0:
                break
        elif np.max(delta) < tol:
            # two more contractions push the residual to rounding level
            extra = 2
    else:
        raise NotExpanding("inverse-branch composition did not contract to a fixed point")
    return np.stack(orbit, axis=1)


def periodic_orbits(fmap, n, budget=2**22, dedupe=True):
    """All periodic orbits of period dividing ``n``; returns ``(orbits, words)``.

    Raises :class:`NotExpanding` for maps with neutral points. Points that
    coincide on the circle (e.g. 0 and 1) are counted once.
    """
    if not is_expanding(fmap):
        raise NotExpanding(f"{fmap!r} has neutral points; use preimage sums")
    if fmap.degree ** n > budget:
        raise BudgetExceeded(f"{fmap.degree}^{n} words exceed budget {budget}")
    words = np.array(list(itertools.product(range(fmap.degree), repeat=n)), dtype=np.int64)
    orbits = periodic_orbits_for_words(fmap, words)
    logd = np.zeros(len(words))
    for k in range(n):
        logd += np.atleast_1d(fmap.log_conorm(orbits[:, k]))
    if np.any(logd <= 0):
        raise NotExpanding("composed inverse branch is not a contraction")
    if dedupe:
        start = orbits[:, 0]
        coords = start.reshape(len(words), -1)
        scale = 1e10
        keys = np.mod(np.round(coords * scale).astype(np.int64), int(scale))
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        orbits, words = orbits[first], words[first]
    return orbits, words


def derivative_min_expansion(fmap, p, n):
    """``(1/n) log`` of the derivative conorm along ``n`` steps of the orbit of ``p``.

    For skew products this is the smaller of the base and fibre averages.
    """
    if n < 1:
        raise ValueError("n >= 1")
    q = _reshape_points(fmap, p)
    if isinstance(fmap, SkewProduct):
        base, fib = np.zeros(len(q)), np.zeros(len(q))
        for _ in range(n):
            base += fmap.log_base_conorm(q)
            fib += fmap.log_fiber_derivative(q)
            q = fmap.eval(q)
        out = np.minimum(base, fib) / n
    else:
        acc = np.zeros(len(q))
        for _ in range(n):
            acc += np.atleast_1d(fmap.log_conorm(q))
            q = fmap.eval(q)
        out = acc / n
    return float(out[0]) if np.ndim(p) == 0 or (fmap.dim > 1 and np.ndim(p) == 1) else out


def repeller_certificate(fmap):
    """Return ``log |D f^k(p)|`` conorm at the declared repeller; positive means certified."""
    p, k = fmap.repeller
    q = _reshape_points(fmap, p)
    back = q
    total = 0.0
    for _ in range(k):
        total += float(np.atleast_1d(fmap.log_conorm(back))[0])
        back = fmap.eval(back)
    closed = float(np.max(circle_distance(back, q)))
    if closed > 1e-10:
        raise ValueError(f"declared repeller is not periodic with period {k}")
    return total
