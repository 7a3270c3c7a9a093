import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermoformalism import dynamics as dyn
from thermoformalism import potentials as pot
from thermoformalism.errors import GapCollapsed, InsufficientRefinement, NonSmoothPoint
from thermoformalism.oracle import closed_form_pressure_pl
from thermoformalism.thermo import (DiscreteMeasure, entropy_via_legendre, equilibrium_state,
                                    expanding_on_average_certificate, gap_onset_scan, invariant_fiber_breakpoints,
                                    lyapunov_exponents, mme_preimage_measure, phase_transition_scan, pressure_sweep,
                                    refine_grid, second_differences, skew_boundary_analysis)

D = dyn.doubling()
PL = dyn.piecewise_linear([2, 3])
MP = dyn.manneville_pomeau(0.5)


def trig_observables(max_degree=8):
    out = []
    for k in range(1, max_degree + 1):
        out.append(lambda x, k=k: np.cos(2 * np.pi * k * x))
        out.append(lambda x, k=k: np.sin(2 * np.pi * k * x))
    return out


@pytest.fixture(scope="module")
def pl_curve():
    return pressure_sweep(PL, pot.geometric_potential(PL), np.linspace(-3, 3, 61), "collocation", 64)


@pytest.fixture(scope="module")
def cos_curves():
    t = np.linspace(-4, 4, 81)
    return [pressure_sweep(D, pot.cosine(), t, "collocation", N) for N in (32, 64)]


# ---------------------------------------------------------------------------
# sweeps

def test_sweep_constant_potential_is_affine():
    t = np.linspace(-2, 2, 9)
    c = pressure_sweep(D, pot.constant(1.0), t, "collocation", 32)
    np.testing.assert_allclose(c.P, np.log(2) + t, atol=1e-12)
    np.testing.assert_allclose(c.P_fd, 1.0, atol=1e-10)
    np.testing.assert_allclose(c.P_mu, 1.0, atol=1e-12)


def test_sweep_pl_closed_form(pl_curve):
    assert np.max(np.abs(pl_curve.P - closed_form_pressure_pl([2, 3], pl_curve.t))) < 1e-6
    chk = pl_curve.checks()
    assert chk["convex"] and chk["lipschitz"]
    assert abs(chk["P0_minus_log_degree"]) < pl_curve.tol


def test_sweep_mp_geometric_bounds():
    t = np.linspace(0, 1.5, 7)
    c = pressure_sweep(MP, pot.geometric_potential(MP), t, "ulam", 2**13, with_gap=False)
    assert np.all(c.P >= -1e-3)
    assert np.all(c.P[t >= 1] <= 5e-2)
    assert np.all(np.isnan(c.gap_ratio))


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        pressure_sweep(D, pot.cosine(), [0.0, 1.0, 0.5], "collocation", 16)


def test_sweep_invariants_on_cosine(cos_curves):
    for c in cos_curves:
        chk = c.checks(convex_tol=1e-6 * np.max(np.abs(c.P)))
        assert chk["convex"] and chk["lipschitz"]
        assert abs(chk["P0_minus_log_degree"]) < 1e-12
        assert np.all(c.converged)


def test_derivative_columns_agree(pl_curve):
    # P_mu is the exact derivative; P_fd is second order in the grid step
    assert np.max(np.abs(pl_curve.P_fd - pl_curve.P_mu)) < 1e-3


@settings(max_examples=10, deadline=None)
@given(i=st.integers(0, 60), j=st.integers(0, 60))
def test_lipschitz_pairs_property(pl_curve, i, j):
    c = pl_curve
    assert abs(c.P[i] - c.P[j]) <= (c.sup_norm + 1e-9) * abs(c.t[i] - c.t[j])


def test_variational_lower_bound_from_periodic_orbits(cos_curves):
    # every periodic-orbit measure has zero entropy, so P(t phi) >= t * (orbit average)
    c = cos_curves[-1]
    for n in range(1, 9):
        orbits, _ = dyn.periodic_orbits(D, n)
        avgs = np.cos(2 * np.pi * orbits).mean(axis=1)
        bound = np.max(np.outer(c.t, avgs), axis=1)
        assert np.all(c.P >= bound - 1e-12)


def test_refine_grid():
    t = np.linspace(0, 2, 5)
    r = refine_grid(t, [(0.5, 1.0, ("kink",))], factor=4)
    np.testing.assert_allclose(r, np.unique(np.concatenate([t, [0.625, 0.75, 0.875]])))
    np.testing.assert_array_equal(refine_grid(t, []), t)


# ---------------------------------------------------------------------------
# equilibrium states

def test_equilibrium_doubling_uniform():
    mu = equilibrium_state(D, pot.constant(0.0), "collocation", 32)
    assert np.max(np.abs(mu.weights - 1 / 32)) < 1e-10
    nu = equilibrium_state(D, pot.constant(0.8), "collocation", 32)
    np.testing.assert_allclose(nu.weights, mu.weights, atol=1e-12)


@pytest.mark.parametrize("scheme,N,tol", [("collocation", 64, 1e-8), ("ulam", 4096, 1e-3)])
def test_equilibrium_pl_acip(scheme, N, tol):
    # invariant density for slopes (2, 3) is piecewise constant: 6/5 on [0, 1/2), 4/5 on [1/2, 1)
    mu = equilibrium_state(PL, pot.geometric_potential(PL), scheme, N)
    assert mu.integrate(lambda x: np.ones_like(x)) == pytest.approx(1.0, abs=1e-12)
    assert mu.integrate(lambda x: (x < 0.5).astype(float)) == pytest.approx(0.6, abs=tol)


@pytest.mark.parametrize("fmap,phi,t", [(D, pot.cosine(), 1.0), (PL, pot.geometric_potential(PL), 1.0),
                                        (MP, pot.geometric_potential(MP), 0.5),
                                        (dyn.perturbed_doubling(0.3), pot.trig_poly([(1, 0.4, -0.2)]), -1.5)],
                         ids=["doubling", "pl", "mp", "perturbed"])
def test_ulam_equilibrium_invariants(fmap, phi, t):
    mu = equilibrium_state(fmap, phi, "ulam", 1024, t=t)
    assert np.min(mu.weights) >= -1e-14
    assert abs(mu.weights.sum() - 1.0) < 1e-12
    for g in trig_observables(8):
        assert mu.invariance_defect(g) <= mu.error_bound


def test_equilibrium_gap_collapsed():
    with pytest.raises(GapCollapsed):
        equilibrium_state(MP, pot.geometric_potential(MP), "ulam", 4096, t=1.2)


# ---------------------------------------------------------------------------
# entropy, exponents, certificates

def test_entropy_via_legendre_examples(pl_curve):
    c = pressure_sweep(D, pot.constant(1.0), np.linspace(-2, 2, 9), "collocation", 32)
    for t in (-1.5, 0.0, 0.7, 2.0):
        assert entropy_via_legendre(c, t) == pytest.approx(np.log(2), abs=1e-10)
    assert entropy_via_legendre(pl_curve, 0.0) == pytest.approx(np.log(2), abs=1e-10)
    exact = np.log(5 / 6) + (np.log(2) / 2 + np.log(3) / 3) / (5 / 6)
    assert entropy_via_legendre(pl_curve, 1.0) == pytest.approx(exact, abs=1e-6)


def test_entropy_via_legendre_errors(pl_curve):
    with pytest.raises(ValueError):
        entropy_via_legendre(pl_curve, 5.0)
    saved = pl_curve.transition_candidates
    pl_curve.transition_candidates = [(0.5, 1.5, ("kink",))]
    try:
        with pytest.raises(NonSmoothPoint):
            entropy_via_legendre(pl_curve, 1.0)
    finally:
        pl_curve.transition_candidates = saved


def test_entropy_is_nonnegative_along_cosine(cos_curves):
    c = cos_curves[-1]
    h = np.array([entropy_via_legendre(c, t) for t in c.t[1:-1]])
    assert np.all(h >= -c.tol)
    assert np.all(h <= np.log(2) + 1e-9)


def test_lyapunov_examples():
    mu = equilibrium_state(D, pot.constant(0.0), "collocation", 32)
    lam = lyapunov_exponents(mu, D)
    assert lam.lambda_min == pytest.approx(np.log(2), abs=1e-12)
    mu = equilibrium_state(MP, pot.geometric_potential(MP), "ulam", 4096, t=0.0)
    assert lyapunov_exponents(mu, MP).lambda_min > 0


def test_lyapunov_skew_min():
    F = dyn.SkewProduct(D, dyn.FiberFamily(dyn.piecewise_linear([3, 1.5])))
    mu = equilibrium_state(F, pot.constant(0.0, dim=2), "ulam", 32)
    lam = lyapunov_exponents(mu, F)
    # max-entropy fibre measure gives each branch mass 1/2
    fiber = 0.5 * (np.log(3) + np.log(1.5))
    assert lam.exponents[0] == pytest.approx(np.log(2), abs=1e-12)
    assert lam.exponents[1] == pytest.approx(fiber, abs=mu.error_bound)
    assert lam.lambda_min == min(lam.exponents)


def test_certificate_examples():
    mu = equilibrium_state(D, pot.cosine(), "collocation", 32)
    cert = expanding_on_average_certificate(mu, D, 3)
    assert cert.certified and cert.l == 1 and cert.value == pytest.approx(np.log(2), abs=1e-12)
    point = DiscreteMeasure(np.array([0.0]), np.array([1.0]))
    cert = expanding_on_average_certificate(point, MP, 4)
    assert not cert.certified and cert.l is None
    np.testing.assert_allclose(cert.values, 0.0, atol=1e-15)
    assert len(cert.values) == 4
    with pytest.raises(ValueError):
        expanding_on_average_certificate(mu, D, 0)


def test_certificate_skew_tm2():
    F = dyn.SkewProduct(D, dyn.FiberFamily(dyn.smooth_intermittent()))
    assert F.class_tag == "TM2"
    mu = equilibrium_state(F, pot.constant(0.0, dim=2), "ulam", 32)
    cert = expanding_on_average_certificate(mu, F, 3)
    lam = lyapunov_exponents(mu, F)
    assert cert.certified and cert.l == 1
    # direct product: Df is diagonal, so the conorm is the smaller of the two rates at each point
    pointwise = mu.integrate(lambda p: np.minimum(np.log(2), F.log_fiber_derivative(p)))
    assert cert.value == pytest.approx(pointwise, abs=1e-12)
    assert cert.value <= min(np.log(2), lam.exponents[1]) + 1e-12


# ---------------------------------------------------------------------------
# skew products

def test_skew_constant_potential_interior():
    F = dyn.SkewProduct(D, dyn.FiberFamily(dyn.smooth_intermittent(), perturbation=0.1))
    rep = skew_boundary_analysis(F, pot.constant(0.0, dim=2), np.linspace(-2, 2, 5), "ulam", 32)
    np.testing.assert_allclose(rep.P_full, np.log(4), atol=1e-12)
    np.testing.assert_allclose(rep.fiber_boundary[0], np.log(2), atol=1e-12)
    assert rep.labels == ["interior"] * 5
    assert rep.subsystem_ok()


def test_skew_tm3_subsystem():
    F = dyn.SkewProduct(MP, dyn.FiberFamily(D))
    phi = pot.geometric_potential(F, "fiber")
    rep = skew_boundary_analysis(F, phi, np.linspace(-1, 1, 5), "ulam", 32)
    assert len(rep.base_boundary) >= 1
    assert rep.subsystem_ok()


def test_skew_bump_at_fiber_breakpoint_dominates():
    F = dyn.SkewProduct(D, dyn.FiberFamily(dyn.smooth_intermittent(), perturbation=0.1))
    a = invariant_fiber_breakpoints(F)
    assert a == [0.0]
    bump = pot.Potential(lambda p: np.exp(-(dyn.circle_distance(p[:, 1], a[0]) / 0.1) ** 2), kind="custom_grid",
                         dim=2, sup_norm=1.0, regularity=("holder", 1.0))
    t = np.linspace(0, 8, 9)
    reps = [skew_boundary_analysis(F, bump, t, "ulam", N) for N in (16, 32)]
    for rep in reps:
        assert rep.labels[0] == "interior"
        assert all(lab == "fiber_boundary(0)" for lab in rep.labels[1:])
        assert np.all(np.diff(rep.margin) < 0)
        np.testing.assert_allclose(rep.fiber_boundary[0], np.log(2) + t, atol=1e-10)
    # the deficit of the full pressure below the boundary shrinks under refinement
    assert np.all(np.abs(reps[1].margin[1:]) < np.abs(reps[0].margin[1:]))


def test_skew_rejects_tm1():
    F = dyn.SkewProduct(D, dyn.FiberFamily(dyn.smooth_intermittent(), rotation=0.1))
    with pytest.raises(ValueError):
        skew_boundary_analysis(F, pot.constant(0.0, dim=2), [0.0, 1.0], "ulam", 16)


# ---------------------------------------------------------------------------
# phase-transition scan

def test_scan_doubling_cosine_is_empty(cos_curves):
    res = phase_transition_scan(cos_curves[-1], cos_curves)
    assert res.candidates == []
    assert res.analytic_set == [(-4.0, 4.0)]


def test_scan_pl_is_empty(pl_curve):
    coarse = pressure_sweep(PL, pot.geometric_potential(PL), pl_curve.t, "collocation", 32)
    res = phase_transition_scan(pl_curve, [coarse, pl_curve])
    assert res.candidates == []


def test_scan_flags_synthetic_kink():
    t = np.linspace(-2, 2, 41)
    curves = []
    for N in (32, 64):
        c = pressure_sweep(D, pot.constant(0.0), t, "collocation", N)
        c.P = np.maximum(np.log(2), np.log(2) + 0.5 * t)
        c.P2_fd = second_differences(t, c.P)
        curves.append(c)
    res = phase_transition_scan(None, curves)
    assert len(res.candidates) == 1
    lo, hi, reasons = res.candidates[0]
    assert lo < 0 < hi and "kink" in reasons


def test_scan_insufficient_refinement():
    t = np.linspace(0, 1, 5)
    a = pressure_sweep(D, pot.cosine(), t, "collocation", 16)
    b = pressure_sweep(D, pot.cosine(), t, "collocation", 32)
    b.P = b.P + 1.0
    with pytest.raises(InsufficientRefinement):
        phase_transition_scan(b, [a, b])
    with pytest.raises(ValueError):
        phase_transition_scan(None, [a])


# ---------------------------------------------------------------------------
# preimage measures and gap onset

def test_mme_preimage_measure():
    mu = mme_preimage_measure(D, 0.0, 10)
    assert mu.integrate(lambda x: np.cos(2 * np.pi * x)) == pytest.approx(0.0, abs=1e-12)
    assert mu.integrate(lambda x: D.log_conorm(x)) == pytest.approx(np.log(2), abs=1e-14)
    assert mu.weights.sum() == pytest.approx(1.0, abs=1e-12)
    mu = mme_preimage_measure(MP, 0.5, 14)
    assert mu.integrate(lambda x: MP.log_conorm(x)) > 0


def test_gap_onset_doubling_full_range():
    r = gap_onset_scan(D, pot.cosine(), "high_temp", "collocation", 48, t_max=4, n_points=5)
    assert r.found and r.threshold == 4.0
    r = gap_onset_scan(D, pot.cosine(), "low_temp", "collocation", 48, t_max=4, n_points=4)
    assert r.found and r.threshold == pytest.approx(0.5)


def test_gap_onset_mp_geometric():
    r = gap_onset_scan(MP, pot.geometric_potential(MP), "high_temp", "ulam", 4096, t_max=2, n_points=9)
    assert r.found and 0.75 <= r.threshold < 1.0


def test_gap_onset_mp_flattened_potential():
    # the flattened sine is constant near the neutral point, and its value there lies strictly between the
    # extreme orbit averages, so no point mass at 0 dominates for either sign of t
    flat = pot.flatten(pot.trig_poly([(1, 0.0, 1.0)]), 0.05, MP)
    for N in (1024, 4096):
        r = gap_onset_scan(MP, flat, "high_temp", "ulam", N, t_max=4, n_points=5)
        assert r.found and r.threshold == 4.0


def test_gap_onset_bad_direction():
    with pytest.raises(ValueError):
        gap_onset_scan(D, pot.cosine(), "sideways", "collocation", 16)
