"""Normal form: straightening, resonant normalization, structure, radius."""

from fractions import Fraction

import numpy as np
import pytest

from nhic import catalog
from nhic.errors import SmallDivisor
from nhic.normal_form import (
    NormalFormChart,
    _euler_solve,
    build_normal_form,
    choose_domain_radius,
    divisor,
    is_exactly_resonant,
    measure_remainder,
    poisson,
    remainder_slope,
    resonant_normalize,
    straighten_hamiltonian,
    verify_structure,
)
from nhic.poly import SparsePoly
from nhic.systems import OMEGA_PHASE, OMEGA_SADDLE, flow_slow


def quadratic(lam1, lam2, degree=5):
    return SparsePoly(4, {(1, 0, 1, 0): lam1, (0, 1, 0, 1): lam2}, trunc=degree)


@pytest.fixture(scope="module")
def pendc_nf():
    return build_normal_form(catalog.pendc(), degree=5)


# -- straightening -------------------------------------------------------------


def test_straighten_identity_on_straight_input():
    H = quadratic(0.7, 1.3)
    chart, H2 = straighten_hamiltonian(H, 0.7, 1.3, 5)
    pts = np.random.default_rng(0).uniform(-0.1, 0.1, (10, 4))
    assert np.max(np.abs(chart.forward(pts) - pts)) < 1e-14
    assert set(H2.coeffs) == set(H.coeffs)


def test_straighten_kills_pure_cubic():
    # H = lam1 s1 u1 + lam2 s2 u2 + s1^3: stable graph gains -s1^2/lam1
    lam1, lam2 = 1.0, 2.5
    H = quadratic(lam1, lam2) + SparsePoly(4, {(3, 0, 0, 0): 1.0}, trunc=5)
    chart, H2 = straighten_hamiltonian(H, lam1, lam2, 5)
    for e, c in H2.coeffs.items():
        if e[2] + e[3] == 0 or e[0] + e[1] == 0:
            assert abs(c) < 1e-12, (e, c)
    # u1 component of the inverse:  u1 = u1' + dv/ds1 with v = -s1^3/(3 lam1)
    inv_u1 = chart.inverse.components[2]
    assert abs(inv_u1.coefficient((2, 0, 0, 0)) - (-1.0 / lam1)) < 1e-12


def test_euler_solve_exact_rationals():
    part = SparsePoly(4, {(0, 0, 3, 0): Fraction(1, 1)})
    w = _euler_solve(part, 2, Fraction(1), Fraction(2))
    assert w.coefficient((0, 0, 3, 0)) == Fraction(-1, 3)


def test_straightened_stable_manifold_decays(pendc_nf):
    nf = pendc_nf
    slow = catalog.pendc()
    lam1 = nf.spectrum.lambda1
    rng = np.random.default_rng(3)
    for _ in range(3):
        s = rng.uniform(-0.5, 0.5, 2)
        s *= 0.08 / np.linalg.norm(s)
        w = np.array([s[0], s[1], 0.0, 0.0])
        z0 = nf.chart.inverse(w)
        traj = flow_slow(slow, z0, 12.0, tol=1e-12, samples=60)
        norms = np.linalg.norm(traj.states, axis=1)
        rate = -np.polyfit(traj.t, np.log(norms), 1)[0]
        assert rate >= lam1 - 0.05


# -- resonance bookkeeping ------------------------------------------------------


def test_odd_degree_has_no_resonances_generic():
    # alpha = beta forces even total degree
    for e in [(1, 0, 2, 0), (0, 1, 1, 1), (3, 0, 0, 0)]:
        assert not is_exactly_resonant(e, None)
    assert is_exactly_resonant((1, 0, 1, 0), None)


def test_degree4_resonant_monomials_enumeration():
    resonant = [
        e
        for e in _all_exponents(4)
        if sum(e) == 4 and is_exactly_resonant(e, None)
    ]
    assert sorted(resonant) == sorted(
        [(2, 0, 2, 0), (0, 2, 0, 2), (1, 1, 1, 1)]
    )


def _all_exponents(deg):
    out = []
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            for c in range(deg + 1 - a - b):
                for d in range(deg + 1 - a - b - c):
                    out.append((a, b, c, d))
    return out


def test_exact_low_order_relation_kept():
    # lam2 = 2 lam1: s1^2 u2 is exactly resonant and must survive
    lam1, lam2 = 0.8, 1.6
    nf_lin = NormalFormChart.linear(lam1, lam2)
    assert nf_lin.spectrum.rational_relation == (2, 1)
    H = quadratic(lam1, lam2, 3) + SparsePoly(4, {(2, 0, 0, 1): 0.3}, trunc=3)
    assert abs(divisor((2, 0, 0, 1), lam1, lam2)) < 1e-14
    N, _ = resonant_normalize(H, nf_lin.spectrum, 3)
    assert abs(N.coefficient((2, 0, 0, 1)) - 0.3) < 1e-12


def test_irrational_spectrum_kills_all_cubics():
    lam1, lam2 = 0.7, 0.7 * np.sqrt(3.0)
    nf_lin = NormalFormChart.linear(lam1, lam2)
    rng = np.random.default_rng(5)
    H = quadratic(lam1, lam2, 3)
    for e in _all_exponents(3):
        if sum(e) == 3:
            H = H + SparsePoly(4, {e: rng.uniform(-1, 1)}, trunc=3)
    N, _ = resonant_normalize(H, nf_lin.spectrum, 3)
    assert all(sum(e) != 3 for e in N.prune(1e-12).coeffs)


def test_small_divisor_raises():
    lam1 = 1.0
    lam2 = 2.0 + 6e-10  # not detected as rational, divisor below tolerance
    nf_lin = NormalFormChart.linear(lam1, lam2)
    assert nf_lin.spectrum.rational_relation is None
    H = quadratic(lam1, lam2, 3) + SparsePoly(4, {(2, 0, 0, 1): 0.3}, trunc=3)
    with pytest.raises(SmallDivisor):
        resonant_normalize(H, nf_lin.spectrum, 3)


def test_normalization_is_symplectic_conjugacy():
    # chart flow maps must preserve the symplectic form on samples
    lam1, lam2 = 0.9, 1.7
    nf_lin = NormalFormChart.linear(lam1, lam2)
    H = quadratic(lam1, lam2, 5) + SparsePoly(
        4, {(1, 0, 0, 2): 0.4, (0, 1, 2, 0): -0.2}, trunc=5
    )
    N, chart = resonant_normalize(H, nf_lin.spectrum, 5)
    omega = OMEGA_SADDLE
    rng = np.random.default_rng(8)
    # defect is O(r^{k-1}) truncation; sample within a validity-ball scale
    pts = rng.uniform(-0.02, 0.02, (10, 4))
    for p in pts:
        J = chart.inverse.jacobian(p)
        assert np.max(np.abs(J.T @ omega @ J - omega)) < 1e-8
    # conjugacy: N(w) = H(inverse(w)) up to truncation order
    w = rng.uniform(-0.05, 0.05, (50, 4))
    err = np.abs(N(w) - _eval_poly(H, chart.inverse(w)))
    assert np.max(err) < 5e-7  # degree-6 truncation at |w| <= 0.1


def _eval_poly(p, pts):
    return p(pts)


# -- structure checks -----------------------------------------------------------


def test_verify_structure_passes_linear():
    nf = NormalFormChart.linear(0.6, 1.1)
    assert verify_structure(nf).passed


def test_verify_structure_flags_illegal_monomial():
    nf = NormalFormChart.linear(0.6, 1.1)
    bad = nf.N + SparsePoly(4, {(1, 0, 0, 1): 1e-6}, trunc=3)  # s1 u2
    nf_bad = NormalFormChart(
        spectrum=nf.spectrum, chart=nf.chart, N=bad, degree_k=nf.degree_k
    )
    rep = verify_structure(nf_bad)
    assert not rep.passed
    assert any(off[1] == (1, 0, 0, 1) for off in rep.offenders)


def test_pendc_structure_and_remainder(pendc_nf):
    nf = pendc_nf
    rep = verify_structure(nf)
    assert rep.passed
    # resonant normal form of a generic spectrum depends on the products
    # s1*u1 and s2*u2 only
    for e in nf.N.coeffs:
        assert e[0] == e[2] and e[1] == e[3]
    slope, _ = remainder_slope(nf, catalog.pendc())
    assert slope >= 5.5


def test_pendc_chart_symplectic(pendc_nf):
    nf = pendc_nf
    rng = np.random.default_rng(11)
    w = rng.normal(size=(20, 4))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    w *= nf.domain_radius_r * 0.9
    for wi in w:
        J = nf.chart.inverse.jacobian(wi)
        assert np.max(np.abs(J.T @ OMEGA_PHASE @ J - OMEGA_SADDLE)) < 1e-8


def test_invariant_planes_of_truncated_field(pendc_nf):
    F1, F2, G1, G2 = pendc_nf.nonlinear_parts()
    # s = 0 invariant: both F's vanish coefficientwise on s=0
    for poly in (F1, F2):
        for e in poly.coeffs:
            assert e[0] + e[1] >= 1
    for poly in (G1, G2):
        for e in poly.coeffs:
            assert e[2] + e[3] >= 1


# -- domain radius ---------------------------------------------------------------


def test_radius_pure_quadratic_hits_scan_maximum():
    nf = NormalFormChart.linear(0.7, 1.2)
    r = choose_domain_radius(nf, eta=0.07, r_max=1.0)
    assert r == 1.0


def test_radius_scales_with_cubic_coefficient():
    lam1, lam2 = 0.7, 1.2
    base = NormalFormChart.linear(lam1, lam2).spectrum

    def chart_with_cubic(c):
        N = quadratic(lam1, lam2, 5) + SparsePoly(
            4, {(2, 0, 1, 0): c}, trunc=5
        )  # s1^2 u1: legal class
        nf = NormalFormChart(
            spectrum=base,
            chart=NormalFormChart.linear(lam1, lam2).chart,
            N=N,
            degree_k=5,
        )
        return choose_domain_radius(nf, eta=0.07, r_max=4.0, r_min=1e-6)

    r1 = chart_with_cubic(0.5)
    r2 = chart_with_cubic(0.25)
    assert r2 / r1 in (1.0, 2.0, 4.0)
    assert r2 >= r1


def test_pendc_radius_supports_default_sections(pendc_nf):
    # delta = 0.05 requires r >= 0.1
    assert pendc_nf.domain_radius_r >= 0.1
    assert pendc_nf.remainder_bound < 1e-6
