"""Discretised transfer operators and their leading spectral data.

Two schemes are provided:

* ``ulam``: cell averages on a partition of [0, 1) (tensor partition for skew
  products). Entries are integrals over exact preimage pieces, evaluated by
  Gauss quadrature in the source variable, so mass is conserved up to
  rounding whenever the weight is ``1/|T'|``.
* ``collocation``: node values at Chebyshev points with barycentric
  interpolation (tensor grid for skew products; Fourier grid for linear torus
  maps).

The matrix is built once per ``(map, scheme, N)`` geometry; only the weights
``exp(t * phi - s)`` change along a temperature sweep.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import CircleMap, SkewProduct, TorusEndomorphism, reduce_mod1
from .errors import NotConverged, SingularBasis

SCHEMES = ("ulam", "collocation")
MESHES = {"ulam": ("auto", "uniform", "graded"), "collocation": ("auto", "chebyshev", "fourier")}
ULAM_QUAD = 8
TENSOR_QUAD = 4


@dataclass(frozen=True)
class Scheme:
    kind: str
    N: int
    mesh: str = "auto"

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.kind!r}")
        if self.N < 8:
            raise ValueError("N >= 8")
        if self.mesh not in MESHES[self.kind]:
            raise ValueError(f"mesh for {self.kind} must be one of {MESHES[self.kind]}")


def scheme_tolerance(scheme, geometry=None):
    """Heuristic accuracy of a discretisation, used for margins and scans."""
    if scheme.kind == "ulam":
        if geometry is not None and geometry.cell_widths is not None:
            return float(np.max(geometry.cell_widths))
        return 1.0 / scheme.N
    return 1e-8


# ---------------------------------------------------------------------------
# meshes and bases

def smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def ulam_edges(N, neutral_points=(), mesh="auto"):
    """Cell edges on [0, 1]; ``graded`` clusters cells at neutral points.

    ``auto`` means graded when there are neutral points and uniform otherwise.

    The graded mesh applies the smoothstep ``3u^2 - 2u^3`` on each arc between
    consecutive neutral points, so cell widths shrink like ``N^-2`` there. If 0
    is not a neutral point it is added as an edge, giving ``N + 1`` cells.
    """
    if mesh == "uniform" or not neutral_points:
        return np.linspace(0.0, 1.0, N + 1)
    pts = np.unique(reduce_mod1(np.asarray(neutral_points, dtype=float)))
    anchors = np.concatenate([pts, [pts[0] + 1.0]])
    lengths = np.diff(anchors)
    counts = np.maximum(1, np.round(N * lengths).astype(int))
    counts[-1] += N - counts.sum()
    pieces = [a + L * smoothstep(np.arange(n) / n) for a, L, n in zip(anchors[:-1], lengths, counts)]
    inner = np.unique(reduce_mod1(np.concatenate(pieces + [[0.0]])))
    return np.concatenate([inner, [1.0]])


def chebyshev_nodes(N):
    """First-kind Chebyshev points on [0, 1] and barycentric weights."""
    k = np.arange(N)
    theta = (2 * k + 1) * np.pi / (2 * N)
    x = 0.5 * (1.0 - np.cos(theta))
    w = (-1.0) ** k * np.sin(theta)
    return x, w


def barycentric_matrix(nodes, weights, x):
    """Cardinal functions ``l_j(x)`` for all nodes, shape ``(len(x), N)``."""
    x = np.asarray(x, dtype=float).ravel()
    diff = x[:, None] - nodes[None, :]
    hit = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = weights[None, :] / diff
        L = c / c.sum(axis=1, keepdims=True)
    rows = hit.any(axis=1)
    if np.any(rows):
        L[rows] = hit[rows].astype(float)
    if not np.all(np.isfinite(L)):
        raise SingularBasis("interpolation nodes collide")
    return L


def fourier_cardinal(N, x):
    """Trigonometric cardinal functions on ``N`` equispaced nodes of the circle.

    For even ``N`` the Nyquist mode is split symmetrically, so the interpolant
    stays real.
    """
    x = np.asarray(x, dtype=float).ravel()
    nodes = np.arange(N) / N
    d = x[:, None] - nodes[None, :]
    s = np.sin(np.pi * d)
    denom = N * s if N % 2 == 1 else N * np.tan(np.pi * d)
    with np.errstate(divide="ignore", invalid="ignore"):
        L = np.sin(N * np.pi * d) / denom
    L[np.abs(s) < 1e-15] = 1.0
    return L


def gauss_legendre(Q):
    g, w = np.polynomial.legendre.leggauss(Q)
    return 0.5 * (g + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# geometry

@dataclass
class Geometry:
    """Everything about a discretisation that does not depend on the potential.

    For sparse (Ulam) geometries, entry ``(rows[k], cols[k])`` accumulates
    ``weights[k] * exp(phi(points[k]))``. For dense (collocation) geometries
    ``cardinal[i, b, :]`` holds the basis functions at the ``b``-th preimage
    of node ``i``.
    """

    scheme: Scheme
    n: int
    points: np.ndarray
    coords: np.ndarray
    sparse: bool
    rows: Optional[np.ndarray] = None
    cols: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    cardinal: Optional[np.ndarray] = None
    cell_widths: Optional[np.ndarray] = None
    shape: tuple = ()
    _csr: tuple = field(default=None, repr=False)

    def csr_layout(self):
        """Sorted unique (row, col) pairs and the scatter index of each point."""
        if self._csr is None:
            key = self.rows.astype(np.int64) * self.n + self.cols
            uniq, inv = np.unique(key, return_inverse=True)
            r, c = np.divmod(uniq, self.n)
            indptr = np.searchsorted(r, np.arange(self.n + 1))
            self._csr = (inv, c.astype(np.int64), indptr, len(uniq))
        return self._csr

    def assemble(self, values):
        """Matrix with entries built from the per-point weights ``exp(...)``."""
        if self.sparse:
            inv, c, indptr, nnz = self.csr_layout()
            data = np.bincount(inv, weights=self.weights * values, minlength=nnz)
            return sp.csr_matrix((data, c, indptr), shape=(self.n, self.n))
        deg = self.cardinal.shape[1]
        W = values.reshape(self.n, deg)
        return np.einsum("ib,ibj->ij", W, self.cardinal)


_GEOMETRY_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def geometry(fmap, scheme: Scheme):
    per_map = _GEOMETRY_CACHE.setdefault(fmap, {})
    if scheme not in per_map:
        per_map[scheme] = _build_geometry(fmap, scheme)
    return per_map[scheme]


def _build_geometry(fmap, scheme):
    if isinstance(fmap, CircleMap):
        if scheme.kind == "ulam":
            return _ulam_circle(fmap, scheme)
        return _collocation_circle(fmap, scheme)
    if isinstance(fmap, SkewProduct):
        if fmap.base_dim != 1:
            raise NotImplementedError("operators on skew products need a circle base")
        if scheme.kind == "ulam":
            return _ulam_skew(fmap, scheme)
        return _collocation_skew(fmap, scheme)
    if isinstance(fmap, TorusEndomorphism):
        if scheme.kind != "collocation":
            raise NotImplementedError("torus maps use the Fourier collocation scheme")
        return _collocation_torus(fmap, scheme)
    raise TypeError(f"unsupported map {fmap!r}")


def _split_pieces(lo, hi, edges):
    """Split each ``[lo_k, hi_k]`` at the interior ``edges``; returns (a, b, owner)."""
    K = len(lo)
    first = np.searchsorted(edges, lo, side="right")
    last = np.searchsorted(edges, hi, side="left")
    counts = np.maximum(last - first, 0) + 1
    owner = np.repeat(np.arange(K), counts)
    offs = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    cuts_lo = np.where(offs == 0, lo[owner], edges[np.clip(first[owner] + offs - 1, 0, len(edges) - 1)])
    last_piece = offs == counts[owner] - 1
    cuts_hi = np.where(last_piece, hi[owner], edges[np.clip(first[owner] + offs, 0, len(edges) - 1)])
    return cuts_lo, cuts_hi, owner


def _ulam_circle(fmap, scheme):
    edges = ulam_edges(scheme.N, fmap.neutral_points, scheme.mesh)
    N = len(edges) - 1
    widths = np.diff(edges)
    gx, gw = gauss_legendre(ULAM_QUAD)
    pts, rows, cols, wts = [], [], [], []
    for b, br in enumerate(fmap.branches):
        y = fmap.inverse_raw(b, edges)
        y[0], y[-1] = br.start, br.end
        y = np.maximum.accumulate(y)
        a, c, owner = _split_pieces(y[:-1], y[1:], edges)
        keep = c > a
        a, c, owner = a[keep], c[keep], owner[keep]
        src = np.clip(np.searchsorted(edges, 0.5 * (a + c), side="right") - 1, 0, N - 1)
        nodes = a[:, None] + (c - a)[:, None] * gx[None, :]
        jac = np.abs(br.derivative(nodes.ravel())).reshape(nodes.shape)
        w = (c - a)[:, None] * gw[None, :] * jac / widths[owner][:, None]
        pts.append(nodes.ravel())
        rows.append(np.repeat(owner, ULAM_QUAD))
        cols.append(np.repeat(src, ULAM_QUAD))
        wts.append(w.ravel())
    return Geometry(scheme=scheme, n=N, points=np.concatenate(pts), coords=0.5 * (edges[:-1] + edges[1:]),
                    sparse=True, rows=np.concatenate(rows), cols=np.concatenate(cols),
                    weights=np.concatenate(wts), cell_widths=widths, shape=(N,))


def _collocation_circle(fmap, scheme):
    """Fourier nodes for maps that are C^1 on the circle, Chebyshev otherwise.

    A Chebyshev basis on [0, 1] admits functions that jump at 0; for a circle
    map this adds a spurious eigenvalue ``exp(phi(p))`` for a fixed point ``p``
    at 0, which would mask the spectral gap.
    """
    N = scheme.N
    fourier = scheme.mesh == "fourier" or (scheme.mesh == "auto" and fmap.smooth_on_circle)
    if fourier and not fmap.is_circle:
        raise ValueError("Fourier collocation needs a map of the whole circle")
    if fourier:
        x = np.arange(N) / N
        pre = fmap.preimages(x)
        L = fourier_cardinal(N, pre.ravel()).reshape(N, fmap.degree, N)
        return Geometry(scheme=scheme, n=N, points=pre.ravel(), coords=x, sparse=False, cardinal=L, shape=(N,))
    x, bw = chebyshev_nodes(N)
    pre = fmap.preimages(x)
    L = barycentric_matrix(x, bw, pre.ravel()).reshape(N, fmap.degree, N)
    return Geometry(scheme=scheme, n=N, points=pre.ravel(), coords=x, sparse=False, cardinal=L, shape=(N,))


def _collocation_skew(fmap, scheme):
    N = scheme.N
    x, bw = chebyshev_nodes(N)
    X, Y = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    pre = fmap.preimages(nodes)
    Lx = barycentric_matrix(x, bw, pre[:, :, 0].ravel()).reshape(N * N, fmap.degree, N)
    Ly = barycentric_matrix(x, bw, pre[:, :, 1].ravel()).reshape(N * N, fmap.degree, N)
    card = np.einsum("pba,pbc->pbac", Lx, Ly).reshape(N * N, fmap.degree, N * N)
    return Geometry(scheme=scheme, n=N * N, points=pre.reshape(-1, 2), coords=nodes, sparse=False,
                    cardinal=card, shape=(N, N))


def _collocation_torus(fmap, scheme):
    N = scheme.N if scheme.N % 2 == 1 else scheme.N + 1
    d = fmap.dim
    u = np.arange(N) / N
    grids = np.meshgrid(*([u] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    pre = fmap.preimages(nodes)
    M = nodes.shape[0]
    flat = pre.reshape(-1, d)
    card = np.ones((flat.shape[0], 1))
    for a in range(d):
        La = fourier_cardinal(N, flat[:, a])
        card = (card[:, :, None] * La[:, None, :]).reshape(flat.shape[0], -1)
    return Geometry(scheme=Scheme("collocation", N), n=M, points=flat, coords=nodes, sparse=False,
                    cardinal=card.reshape(M, fmap.degree, M), shape=(N,) * d)


def _ulam_skew(fmap, scheme):
    """Tensor Ulam partition ``N x N`` for a skew product over a circle map.

    For each quadrature node ``x'`` of the base preimage pieces, the fibre
    branch domain is cut at the preimages of all fibre edges and at the source
    fibre edges, so every piece maps into one target cell from one source cell.
    """
    N = scheme.N
    base, fam = fmap.base, fmap.family
    edges = np.linspace(0.0, 1.0, N + 1)
    gx, gw = gauss_legendre(TENSOR_QUAD)

    # base preimage pieces
    bx, bwt, btgt, bsrc = [], [], [], []
    for b, br in enumerate(base.branches):
        y = base.inverse_raw(b, edges)
        y[0], y[-1] = br.start, br.end
        y = np.maximum.accumulate(y)
        a, c, owner = _split_pieces(y[:-1], y[1:], edges)
        keep = c > a
        a, c, owner = a[keep], c[keep], owner[keep]
        src = np.clip(np.searchsorted(edges, 0.5 * (a + c), side="right") - 1, 0, N - 1)
        nodes = a[:, None] + (c - a)[:, None] * gx[None, :]
        jac = np.abs(br.derivative(nodes.ravel())).reshape(nodes.shape)
        bx.append(nodes.ravel())
        bwt.append(((c - a)[:, None] * gw[None, :] * jac * N).ravel())
        btgt.append(np.repeat(owner, TENSOR_QUAD))
        bsrc.append(np.repeat(src, TENSOR_QUAD))
    bx, bwt = np.concatenate(bx), np.concatenate(bwt)
    btgt, bsrc = np.concatenate(btgt), np.concatenate(bsrc)
    M = len(bx)

    r = fam.r(bx)
    prof_bp = fam.profile.breakpoints
    kf = fam.degree
    pts, rows, cols, wts = [], [], [], []
    for j in range(kf):
        start = r + prof_bp[j]
        end = r + (prof_bp[j + 1] if j + 1 < kf else 1.0)
        # preimages of fibre edges, lifted into [start, end)
        pre = np.stack([fam.inverse(j, bx, np.full(M, e)) for e in edges[:-1]], axis=1)
        pre = start[:, None] + reduce_mod1(pre - start[:, None])
        src_edges = start[:, None] + reduce_mod1(edges[None, :-1] - start[:, None])
        src_edges = np.where(src_edges < end[:, None], src_edges, end[:, None])
        cuts = np.sort(np.concatenate([start[:, None], pre, src_edges, end[:, None]], axis=1), axis=1)
        a, c = cuts[:, :-1], cuts[:, 1:]
        keep = c > a
        owner = np.nonzero(keep)[0]
        a, c = a[keep], c[keep]
        ynodes = a[:, None] + (c - a)[:, None] * gx[None, :]
        xq = np.repeat(bx[owner], TENSOR_QUAD)
        yq = reduce_mod1(ynodes.ravel())
        jac = np.abs(fam.dy(xq, yq)).reshape(ynodes.shape)
        w = (c - a)[:, None] * gw[None, :] * jac * N * bwt[owner][:, None]
        mid = 0.5 * (a + c)
        src_f = np.clip((reduce_mod1(mid) * N).astype(np.int64), 0, N - 1)
        tgt_val = fam.eval(bx[owner], reduce_mod1(mid))
        tgt_f = np.clip((tgt_val * N).astype(np.int64), 0, N - 1)
        pts.append(np.column_stack([xq, yq]))
        rows.append(np.repeat(btgt[owner] * N + tgt_f, TENSOR_QUAD))
        cols.append(np.repeat(bsrc[owner] * N + src_f, TENSOR_QUAD))
        wts.append(w.ravel())
    centers = 0.5 * (edges[:-1] + edges[1:])
    X, Y = np.meshgrid(centers, centers, indexing="ij")
    return Geometry(scheme=scheme, n=N * N, points=np.concatenate(pts), coords=np.column_stack([X.ravel(), Y.ravel()]),
                    sparse=True, rows=np.concatenate(rows), cols=np.concatenate(cols),
                    weights=np.concatenate(wts), cell_widths=np.full(N, 1.0 / N), shape=(N, N))


# ---------------------------------------------------------------------------
# operator

class DiscretizedOperator:
    """Matrix of ``L_{f, t phi}`` stored with the shift ``s = max t phi`` removed.

    ``apply`` and ``apply_transpose`` act with the true scale ``exp(s) M``.
    """

    def __init__(self, fmap, geom: Geometry, matrix, shift, phi_values, t, potential=None):
        self.map = fmap
        self.geometry = geom
        self.scheme = geom.scheme
        self.N = geom.n
        self.matrix = matrix
        self.shift = float(shift)
        self.t = float(t)
        self.potential = potential
        self._phi_values = phi_values

    def __repr__(self):
        return f"DiscretizedOperator({self.scheme.kind}, N={self.N}, t={self.t})"

    @property
    def coords(self):
        return self.geometry.coords

    @property
    def nonnegative(self):
        """Entry nonnegativity certificate (true for Ulam by construction)."""
        if sp.issparse(self.matrix):
            return bool(np.all(self.matrix.data >= 0))
        return bool(np.all(self.matrix >= 0))

    def apply(self, v):
        return np.exp(self.shift) * (self.matrix @ v)

    def apply_transpose(self, v):
        return np.exp(self.shift) * (self.matrix.T @ v)

    def dense(self):
        """Unshifted dense matrix."""
        M = self.matrix.toarray() if sp.issparse(self.matrix) else np.array(self.matrix)
        return np.exp(self.shift) * M

    def weighted_matrix(self, g_values):
        """Shifted matrix with weights multiplied by ``g`` at the preimage points."""
        g = self._weights * g_values
        return self.geometry.assemble(g)

    @property
    def _weights(self):
        return np.exp(self.t * self._phi_values - self.shift)


def evaluate_on_geometry(phi, geom):
    return np.asarray(phi(geom.points), dtype=float)


def build(fmap, phi, scheme, N=None, t=1.0, phi_values=None, mesh="auto"):
    """Discretise ``L_{f, t phi}``.

    Parameters
    ----------
    fmap : CircleMap, SkewProduct or TorusEndomorphism
    phi : Potential
    scheme : Scheme or str
        ``"ulam"`` or ``"collocation"`` (then ``N`` is required).
    t : float
        Inverse temperature multiplying ``phi``.
    phi_values : array, optional
        ``phi`` at the geometry points, to skip re-evaluation during sweeps.
    """
    if not isinstance(scheme, Scheme):
        scheme = Scheme(scheme, int(N), mesh)
    geom = geometry(fmap, scheme)
    vals = evaluate_on_geometry(phi, geom) if phi_values is None else phi_values
    tv = t * vals
    s = float(np.max(tv))
    M = geom.assemble(np.exp(tv - s))
    return DiscretizedOperator(fmap, geom, M, s, vals, t, potential=phi)


# ---------------------------------------------------------------------------
# spectra

@dataclass
class SpectralReport:
    lambda1: float
    h: np.ndarray
    nu: np.ndarray
    shift: float
    residual_right: float
    residual_left: float
    iterations: int
    converged: bool
    scheme: str
    N: int
    coords: np.ndarray
    lambda2_modulus: float = float("nan")
    gap_ratio: float = float("nan")
    gap_converged: bool = False

    @property
    def pressure(self):
        return float(np.log(self.lambda1_shifted) + self.shift)

    @property
    def lambda1_shifted(self):
        return self.lambda1 * np.exp(-self.shift) if np.isfinite(self.lambda1) else self._lam_s

    def to_json(self):
        return json.dumps({
            "lambda1": self.lambda1, "pressure": self.pressure, "gap_ratio": self.gap_ratio,
            "residuals": {"right": self.residual_right, "left": self.residual_left},
            "scheme": self.scheme, "N": self.N, "iterations": self.iterations, "converged": self.converged,
        }, indent=2, sort_keys=True)

    def to_csv(self):
        coords = np.asarray(self.coords).reshape(len(self.h), -1)
        names = ["x"] if coords.shape[1] == 1 else [f"x{i}" for i in range(coords.shape[1])]
        lines = [",".join(names + ["h", "nu"])]
        for c, hv, nv in zip(coords, self.h, self.nu):
            lines.append(",".join(f"{v:.16e}" for v in (*c, hv, nv)))
        return "\n".join(lines) + "\n"


def _power(M, v, tol, max_iter):
    """Power iteration normalised in the max norm; returns (lam, v, iters, ok)."""
    lam_old = None
    v = v / np.max(np.abs(v))
    for it in range(1, max_iter + 1):
        w = M @ v
        lam = float(np.dot(v, w) / np.dot(v, v))
        nrm = np.max(np.abs(w))
        if not np.isfinite(nrm) or nrm == 0:
            return lam, v, it, False
        res = np.max(np.abs(w - lam * v))
        v = w / nrm
        if lam_old is not None and abs(lam - lam_old) < tol * abs(lam) and res <= 1e-11 * abs(lam):
            return lam, v, it, True
        lam_old = lam
    return lam, v, max_iter, False


def _arnoldi_perron(M, v0):
    """Perron root and vector by implicitly restarted Arnoldi."""
    n = M.shape[0]
    if n <= 400:
        A = M.toarray() if sp.issparse(M) else M
        vals, vecs = np.linalg.eig(A)
    else:
        k = min(6, n - 2)
        vals, vecs = spla.eigs(spla.aslinearoperator(M), k=k, which="LM", v0=v0, tol=1e-14, maxiter=20 * n)
    rmax = np.max(np.abs(vals))
    cand = np.nonzero((np.abs(vals) >= rmax * (1 - 1e-9)) & (np.abs(vals.imag) <= 1e-10 * rmax) & (vals.real > 0))[0]
    i = cand[0] if len(cand) else int(np.argmax(vals.real))
    v = np.real(vecs[:, i])
    if np.sum(v) < 0:
        v = -v
    return float(np.real(vals[i])), v / np.max(np.abs(v))


def _polish(M, lam, v, steps=3):
    for _ in range(steps):
        w = M @ v
        lam = float(np.dot(v, w) / np.dot(v, v))
        v = w / np.max(np.abs(w))
    return lam, v


def _eigvec(M, tol, max_iter, start):
    lam, v, it, ok = _power(M, start, tol, max_iter)
    if not ok:
        lam, v = _arnoldi_perron(M, v)
        lam, v = _polish(M, lam, v)
        res = np.max(np.abs(M @ v - lam * v))
        ok = res <= 1e-10 * abs(lam)
    return lam, v, it, ok


def leading_eigentriple(op: DiscretizedOperator, tol=1e-14, max_iter=3000):
    """Leading eigenvalue, right eigenvector ``h`` and left eigenvector ``nu``.

    Power iteration from the constant vector (and its transpose from uniform
    mass); if it has not settled within ``max_iter`` steps the Perron pair is
    taken from an Arnoldi solve started at the last iterate and polished.
    ``nu`` sums to one and ``nu . h = 1``.
    """
    M = op.matrix
    n = M.shape[0]
    lam, h, it_r, ok_r = _eigvec(M, tol, max_iter, np.ones(n))
    MT = M.T.tocsr() if sp.issparse(M) else np.ascontiguousarray(M.T)
    lam_l, nu, it_l, ok_l = _eigvec(MT, tol, max_iter, np.full(n, 1.0 / n))
    nu = nu / np.sum(nu)
    pair = float(np.dot(nu, h))
    h = h / pair
    res_r = float(np.max(np.abs(M @ h - lam * h)) / max(np.max(np.abs(h)), 1e-300))
    res_l = float(np.max(np.abs(MT @ nu - lam * nu)) / max(np.max(np.abs(nu)), 1e-300))
    converged = bool(ok_r and ok_l and lam > 0 and abs(lam - lam_l) <= 1e-9 * abs(lam))
    rep = SpectralReport(
        lambda1=float(lam * np.exp(op.shift)), h=h, nu=nu, shift=op.shift,
        residual_right=res_r, residual_left=res_l, iterations=max(it_r, it_l), converged=converged,
        scheme=op.scheme.kind, N=op.N, coords=op.coords,
    )
    rep._lam_s = lam
    return rep


def subleading_modulus(op: DiscretizedOperator, report: SpectralReport, k=6):
    """Fill ``lambda2_modulus`` and ``gap_ratio`` from the deflated operator.

    The rank-one deflation ``v -> M v - lam h (nu . v)`` removes the Perron
    pair; its dominant modulus is found by a dense solve for small matrices
    and by Arnoldi otherwise.
    """
    M = op.matrix
    n = M.shape[0]
    lam = report.lambda1_shifted
    h, nu = report.h, report.nu
    ok = True
    if n <= 600:
        A = M.toarray() if sp.issparse(M) else np.array(M)
        D = A - lam * np.outer(h, nu)
        mod = float(np.max(np.abs(np.linalg.eigvals(D))))
    else:
        Lop = spla.LinearOperator((n, n), matvec=lambda v: M @ v - lam * h * np.dot(nu, v), dtype=float)
        v0 = np.cos(np.linspace(0.0, 7.0, n))
        # the deflated spectrum is often a tight cluster; a wide Krylov space copes
        vals = np.array([])
        for ncv in (80, 160):
            try:
                vals = spla.eigs(Lop, k=k, ncv=min(ncv, n - 1), which="LM", v0=v0, tol=1e-6, maxiter=300,
                                 return_eigenvectors=False)
                ok = True
                break
            except spla.ArpackNoConvergence as exc:
                vals = exc.eigenvalues if len(exc.eigenvalues) else vals
                ok = False
        mod = float(np.max(np.abs(vals))) if len(vals) else float("nan")
    report.lambda2_modulus = float(mod * np.exp(op.shift))
    report.gap_ratio = float(mod / lam)
    report.gap_converged = ok and report.converged
    return report


def spectral_report(op, tol=1e-14, max_iter=3000, with_gap=True):
    rep = leading_eigentriple(op, tol=tol, max_iter=max_iter)
    if with_gap:
        subleading_modulus(op, rep)
    return rep


def pressure(op, report=None):
    """``log lambda1`` with the shift added back; raises if not converged."""
    rep = report or leading_eigentriple(op)
    if not rep.converged:
        raise NotConverged(f"leading eigenpair did not converge for {op!r}")
    return rep.pressure


def pressure_derivative(op, report):
    """``d/dt log lambda1`` = ``nu M_phi h / (lam nu h)``: the integral of phi against the equilibrium state."""
    Mphi = op.weighted_matrix(op._phi_values)
    lam = report.lambda1_shifted
    return float(np.dot(report.nu, Mphi @ report.h) / (lam * np.dot(report.nu, report.h)))
