"""System model: resonance location, reduction, assumptions, flows."""

import numpy as np
import pytest

from nhic import catalog, systems
from nhic.errors import NonUniqueMinimum
from nhic.poly import PolyMap
from nhic.systems import (
    FastHamiltonian,
    Fourier2,
    PhasePoint,
    ResonancePair,
    SlowSystem,
    check_saddle_assumptions,
    flow_full,
    flow_slow,
    linearize_at_origin,
    locate_double_resonance,
    reduce_to_slow,
    resonant_combination,
)

RNG = np.random.default_rng(42)


# -- locate_double_resonance --------------------------------------------------


def test_locate_trivial_origin():
    fast = FastHamiltonian(np.eye(2), [], 1e-4)
    res = ResonancePair(((0, 1), 0), ((1, 0), 0))
    p0 = locate_double_resonance(fast, res)
    assert np.allclose(p0, [0.0, 0.0], atol=1e-12)


def test_locate_offset():
    fast = FastHamiltonian(np.eye(2), [], 1e-4)
    res = ResonancePair(((0, 1), -1), ((1, 0), 0))
    p0 = locate_double_resonance(fast, res)
    assert np.allclose(p0, [0.0, 1.0], atol=1e-12)


def test_locate_coupled_hessian_vs_linear_solve():
    H = np.array([[1.0, 0.1], [0.1, 1.0]])
    fast = FastHamiltonian(H, [], 1e-4)
    res = ResonancePair(((1, 1), -1), ((1, -1), 0))
    p0 = locate_double_resonance(fast, res)
    # independent exact linear solve: B H p = -k0
    B = res.B
    expect = np.linalg.solve(B @ H, -res.k0_vec)
    assert np.allclose(p0, expect, atol=1e-12)
    assert np.allclose(p0, [0.45454545, 0.45454545], atol=1e-6)
    assert np.linalg.norm(B @ fast.grad_h0(p0) + res.k0_vec, np.inf) < 1e-12


# -- reduce_to_slow -----------------------------------------------------------


def test_reduce_drops_nonresonant_and_translates():
    fast = FastHamiltonian(
        np.eye(2),
        [(1, 0, 0, -1.0, 0.0), (0, 1, 0, -0.4, 0.0), (1, 0, 3, 1.0, 0.0)],
        1e-4,
    )
    res = ResonancePair(((1, 0), 0), ((0, 1), 0))
    slow = reduce_to_slow(fast, res, np.zeros(2))
    expect = Fourier2([(0, 0, 1.4, 0), (1, 0, -1.0, 0), (0, 1, -0.4, 0)])
    pts = RNG.uniform(0, 2 * np.pi, (60, 2))
    assert np.max(np.abs(slow.U.value(pts) - expect.value(pts))) < 1e-12
    assert np.allclose(slow.theta_shift, [np.pi, np.pi], atol=1e-9)


def test_reduce_no_resonant_modes_gives_zero_potential():
    fast = FastHamiltonian(np.eye(2), [(1, 0, 3, 1.0, 0.0)], 1e-4)
    res = ResonancePair(((1, 0), 0), ((0, 1), 0))
    slow = reduce_to_slow(fast, res, np.zeros(2))
    assert slow.U.is_zero()


def test_reduce_kinetic_matrix():
    fast = FastHamiltonian(np.eye(2), [], 1e-4)
    res = ResonancePair(((1, 1), 0), ((1, -1), 0))
    slow = reduce_to_slow(fast, res, np.zeros(2))
    assert np.allclose(slow.K_matrix, np.diag([2.0, 2.0]))
    # oracle: direct matrix product
    assert np.allclose(slow.K_matrix, res.B @ np.eye(2) @ res.B.T)


def test_reduce_linearity_in_h1():
    fast1, res = catalog.pendc_fast(1e-4)
    doubled = [(k1, k2, kt, 2 * a, 2 * b) for k1, k2, kt, a, b in fast1.h1_modes]
    fast2 = FastHamiltonian(np.eye(2), doubled, 1e-4)
    s1 = reduce_to_slow(fast1, res, np.zeros(2))
    s2 = reduce_to_slow(fast2, res, np.zeros(2))
    pts = RNG.uniform(0, 2 * np.pi, (60, 2))
    assert np.max(np.abs(s2.U.value(pts) - 2 * s1.U.value(pts))) < 1e-12


def test_reduce_reports_nonunique_minimum():
    # U_raw = -cos(2 theta1) - cos(theta2): two minima in theta1
    fast = FastHamiltonian(np.eye(2), [(2, 0, 0, 1.0, 0.0), (0, 1, 0, 1.0, 0.0)], 1e-4)
    res = ResonancePair(((1, 0), 0), ((0, 1), 0))
    with pytest.raises(NonUniqueMinimum):
        reduce_to_slow(fast, res, np.zeros(2))


def test_resonant_lattice_filter_vs_bruteforce():
    res = ResonancePair(((1, 1), -1), ((1, -1), 0))
    lattice = set()
    for a in range(-20, 21):
        for b in range(-20, 21):
            m = a * np.array([1, 1, -1]) + b * np.array([1, -1, 0])
            lattice.add(tuple(m))
    rng = np.random.default_rng(7)
    for _ in range(300):
        triple = tuple(rng.integers(-8, 9, 3))
        got = resonant_combination(triple, res)
        assert (got is not None) == (triple in lattice), triple


# -- assumptions and linearization -------------------------------------------


def test_pend0_rates():
    rep = check_saddle_assumptions(catalog.pend0())
    assert rep.passed
    assert abs(rep.lambda1 - np.sqrt(0.4)) < 1e-12
    assert abs(rep.lambda2 - 1.0) < 1e-12


def test_pendc_rates_match_eigensolve_oracle():
    rep = check_saddle_assumptions(catalog.pendc())
    assert rep.passed
    H = np.array([[0.45, -0.05], [-0.05, 1.05]])
    mu = np.linalg.eigvalsh(H)
    assert abs(rep.lambda1 - np.sqrt(mu[0])) < 1e-12
    assert abs(rep.lambda2 - np.sqrt(mu[1])) < 1e-12
    assert abs(rep.lambda1 - 0.66773) < 1e-4
    assert abs(rep.lambda2 - 1.02671) < 1e-4


def test_degenerate_minimum_fails():
    # U = (1-cos t1)(1-cos t2): minimum set is a curve
    u = Fourier2(
        [
            (0, 0, 1.0, 0),
            (1, 0, -1.0, 0),
            (0, 1, -1.0, 0),
            (1, 1, 0.5, 0),
            (1, -1, 0.5, 0),
        ]
    )
    slow = SlowSystem(K_matrix=np.eye(2), U=u)
    rep = check_saddle_assumptions(slow)
    assert not rep.passed


def test_linearize_1dof_block():
    # 0.5 I^2 - 0.5 theta^2 per axis: H2 = s1 u1 (lambda = 1) in each block
    u = Fourier2([(0, 0, 1.0 + 0.5, 0), (1, 0, -0.5, 0), (0, 1, -1.0, 0)])
    # potential 0.5(1-cos t1) + (1-cos t2): rates sqrt(0.5), 1
    slow = SlowSystem(K_matrix=np.eye(2), U=u)
    spec = linearize_at_origin(slow)
    assert spec.symplectic_defect() < 1e-10
    H2 = slow.hamiltonian_taylor(2)
    chart = PolyMap.from_linear(spec.eigenbasis, trunc=2)
    H2w = H2.subs(chart.components).prune(1e-12)
    assert abs(H2w.coefficient((1, 0, 1, 0)) - spec.lambda1) < 1e-12
    assert abs(H2w.coefficient((0, 1, 0, 1)) - spec.lambda2) < 1e-12
    assert len(H2w.coeffs) == 2


def test_linearize_pendc_kills_cross_terms():
    slow = catalog.pendc()
    spec = linearize_at_origin(slow)
    H2 = slow.hamiltonian_taylor(2)
    chart = PolyMap.from_linear(spec.eigenbasis, trunc=2)
    H2w = H2.subs(chart.components).prune(1e-12)
    assert set(H2w.coeffs) == {(1, 0, 1, 0), (0, 1, 0, 1)}


# -- flows --------------------------------------------------------------------


def test_fixed_point_stays():
    traj = flow_slow(catalog.pend0(), np.array([np.pi, np.pi, 0.0, 0.0]), 10.0)
    assert np.max(np.abs(traj.states - traj.states[0])) < 1e-9


def test_energy_conservation():
    tol = 1e-12
    traj = flow_slow(catalog.pend0(), np.array([0.1, 0.0, 0.0, 0.0]), 20.0, tol=tol)
    assert traj.energy_drift() < 10 * tol * (1 + 20.0) + 1e-13


def test_separatrix_closed_form():
    lam = np.sqrt(0.4)
    x0 = np.array([np.pi, 0.0, 2 * lam, 0.0])
    traj = flow_slow(catalog.pend0(), x0, 5.0, tol=1e-12, samples=80)
    th_exact = 4 * np.arctan(np.exp(lam * traj.t))
    assert np.max(np.abs(traj.states[:, 0] - th_exact)) < 1e-8
    traj_b = flow_slow(catalog.pend0(), x0, -5.0, tol=1e-12, samples=80)
    th_exact_b = 4 * np.arctan(np.exp(lam * traj_b.t))
    assert np.max(np.abs(traj_b.states[:, 0] - th_exact_b)) < 1e-8


def test_reversibility():
    slow = catalog.pendc()
    x0 = np.array([0.4, -0.3, 0.25, 0.15])
    fwd = flow_slow(slow, x0, 6.0, tol=1e-12)
    invol = np.array([1, 1, -1, -1.0])
    back = flow_slow(slow, x0 * invol, -6.0, tol=1e-12)
    assert np.max(np.abs(fwd.states * invol - back.states)) < 1e-9


def test_leapfrog_energy():
    slow = catalog.pendc()
    traj = flow_slow(slow, np.array([0.3, 0.2, 0.1, 0.0]), 50.0, method="leapfrog")
    assert traj.energy_drift() < 1e-6


def test_full_flow_eps0_matches_slow():
    fast, res = catalog.pendc_fast(0.0)
    slow = reduce_to_slow(fast, res, locate_double_resonance(fast, res))
    x0 = np.array([0.5, 0.3, 0.2, -0.1])
    a = flow_slow(slow, x0, 1.0, tol=1e-12, samples=100)
    b = flow_full(fast, res, x0, 1.0, tol=1e-12, samples=100, slow=slow)
    assert np.max(np.abs(a.states - b.states)) < 1e-10


def test_full_flow_sqrt_eps_scaling():
    fast, res = catalog.pendc_fast(1e-4)
    slow = reduce_to_slow(fast, res, locate_double_resonance(fast, res))
    x0 = np.array([0.5, 0.3, 0.2, -0.1])
    ref = flow_slow(slow, x0, 1.0, tol=1e-12, samples=150)

    def deviation(eps):
        f, r = catalog.pendc_fast(eps)
        tr = flow_full(f, r, x0, 1.0, tol=1e-12, samples=150, slow=slow)
        return np.max(np.linalg.norm(tr.states - ref.states, axis=1))

    d1, d4 = deviation(1e-4), deviation(2.5e-5)
    assert d1 < 0.05
    assert 1.6 < d1 / d4 < 2.4


def test_phase_point_reduction_and_csv(tmp_path):
    p = PhasePoint(np.array([7.0, -1.0]), np.array([0.5, 0.0]))
    assert np.all(p.theta >= 0) and np.all(p.theta < 2 * np.pi)
    traj = flow_slow(catalog.pend0(), np.array([0.1, 0, 0, 0]), 1.0, samples=16)
    path = tmp_path / "orbit.csv"
    traj.write_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "t,theta1,theta2,I1,I2,E"
