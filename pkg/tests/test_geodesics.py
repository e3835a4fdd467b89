"""Jacobi geodesics: lengths, minimizers, classification, words, families."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from nhic import catalog
from nhic import geodesics as geo
from nhic.errors import DegenerateMetric, NotABasis
from nhic.systems import TWO_PI, flow_slow

AXIS_LEN = math.sqrt(0.4) * 4 * math.sqrt(2)


@pytest.fixture(scope="module")
def pend0():
    return catalog.pend0()


@pytest.fixture(scope="module")
def axis_loop(pend0):
    return geo.minimize_loop(pend0, (1, 0), 0.0, N=512)


# -- jacobi_length --------------------------------------------------------------


def test_axis_loop_length_quadrature_oracle(pend0, axis_loop):
    # oracle: 1-D quadrature of sqrt(0.4 (1 - cos t))
    oracle = quad(lambda th: math.sqrt(0.4 * (1 - math.cos(th))), 0, TWO_PI)[0]
    assert abs(oracle - AXIS_LEN) < 1e-9
    assert abs(axis_loop.length - AXIS_LEN) < 1e-4


def test_length_monotone_in_energy(pend0, axis_loop):
    l0 = geo.jacobi_length(pend0, axis_loop, 0.0)
    l1 = geo.jacobi_length(pend0, axis_loop, 0.3)
    assert l1 > l0


def test_length_parametrization_invariance(pend0, axis_loop):
    # nonuniform resampling of the same geometric loop
    pts = axis_loop.points
    s = np.linspace(0, 1, len(pts)) ** 2  # clustered parametrization
    s_old = np.linspace(0, 1, len(pts))
    resampled = np.column_stack(
        [np.interp(s, s_old, pts[:, 0]), np.interp(s, s_old, pts[:, 1])]
    )
    l_orig = geo.jacobi_length(pend0, None, 0.0, pts=pts)
    l_re = geo.jacobi_length(pend0, None, 0.0, pts=resampled)
    # the reparametrized polygon has unequal chords but identical vertices
    assert abs(l_orig - l_re) < 1e-10 * max(1, l_orig) + 5e-7


def test_degenerate_metric_raises(pend0, axis_loop):
    with pytest.raises(DegenerateMetric):
        geo.jacobi_length(pend0, axis_loop, -0.15)


# -- minimize_loop ----------------------------------------------------------------


def test_minimize_weak_axis(pend0, axis_loop):
    assert abs(axis_loop.length - AXIS_LEN) < 1e-4
    assert axis_loop.el_residual < 1e-8
    # stays on the axis
    assert np.max(np.abs(axis_loop.points[:, 1])) < 1e-9


def test_minimize_strong_axis(pend0):
    loop = geo.minimize_loop(pend0, (0, 1), 0.0, N=512)
    assert abs(loop.length - 4 * math.sqrt(2)) < 1e-4


def test_minimize_flat_closed_form():
    flat = catalog.flat()
    for h in ((1, 0), (1, 1)):
        loop = geo.minimize_loop(flat, h, 1.0, N=128)
        expect = math.sqrt(1.0) * TWO_PI * math.hypot(*h)
        assert abs(loop.length - expect) < 1e-9


def test_homology_correctness(pend0):
    loop = geo.minimize_loop(pend0, (1, 1), 0.5, N=256)
    gap = loop.points[-1] - loop.points[0]
    assert np.max(np.abs(gap / TWO_PI - np.array([1, 1]))) < 1e-6 / TWO_PI


def test_oracle_sandwich(pend0, axis_loop):
    oracle = geo.grid_graph_length(pend0, (1, 0), 0.0, n=64)
    # left inequality up to quadrature noise; right is the 3% grid slack
    assert axis_loop.length <= oracle + 1e-6
    assert oracle <= axis_loop.length * 1.03


def test_oracle_flat_exact():
    flat = catalog.flat()
    loop = geo.minimize_loop(flat, (1, 0), 1.0, N=128)
    oracle = geo.grid_graph_length(flat, (1, 0), 1.0, n=64)
    assert abs(oracle - loop.length) < 1e-6


# -- classification ---------------------------------------------------------------


def test_axis_loop_simple(axis_loop):
    assert geo.classify_loop(axis_loop).simple


def _resample_polyline(vertices, n):
    verts = np.asarray(vertices, dtype=float)
    seg = np.linalg.norm(np.diff(verts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s_new = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack(
        [np.interp(s_new, s, verts[:, 0]), np.interp(s_new, s, verts[:, 1])]
    )


def test_figure_eight_nonsimple():
    # explicit polygon with one transversal self-crossing (class (1, 0))
    pts = _resample_polyline(
        [(0.0, 0.0), (5.0, 3.0), (1.0, 1.0), (TWO_PI, 0.0)], 128
    )
    loop = geo.DiscreteLoop(
        points=pts, homology=geo.HomologyClass((1, 0)), energy=1.0, length=1.0
    )
    cl = geo.classify_loop(loop)
    assert not cl.simple
    assert any(m == (0, 0) for *_, m in cl.intersections)


def test_classification_matches_bruteforce(pend0):
    loop = geo.minimize_loop(pend0, (1, 1), 0.4, N=256)
    a = geo.classify_loop(loop)
    b = geo.classify_loop_bruteforce(loop)
    assert a.kind == b.kind


def test_translate_intersections_detected():
    # overshooting zigzag meets its own vertical torus translate
    pts = _resample_polyline(
        [(0.0, 0.0), (4.0, 7.0), (2.0, -5.0), (TWO_PI, 0.0)], 128
    )
    loop = geo.DiscreteLoop(
        points=pts, homology=geo.HomologyClass((1, 0)), energy=1.0, length=1.0
    )
    cl = geo.classify_loop(loop)
    assert not cl.simple
    assert any(m != (0, 0) for *_, m in cl.intersections)


# -- words ------------------------------------------------------------------------


def test_word_single_letter():
    w = geo.loop_word((1, 0), (1, 0), (0, 1), rng=np.random.default_rng(0))
    assert w.canonical_rotation == (1,)


def test_word_21():
    w = geo.loop_word((2, 1), (1, 0), (0, 1), rng=np.random.default_rng(1))
    assert w.canonical_rotation == geo.canonical_rotation((1, 1, 2))


def test_word_32():
    w = geo.loop_word((3, 2), (1, 0), (0, 1), rng=np.random.default_rng(2))
    assert w.canonical_rotation == geo.canonical_rotation((1, 2, 1, 1, 2))


def test_word_base_point_independent():
    rng = np.random.default_rng(3)
    words = {
        geo.loop_word((3, 2), (1, 0), (0, 1), rng=rng).canonical_rotation
        for _ in range(100)
    }
    assert len(words) == 1


def test_word_skew_basis():
    # h = 2 h1 + h2 in a non-coordinate basis
    h1, h2 = (1, 1), (0, 1)
    h = (2, 3)
    w = geo.loop_word(h, h1, h2, rng=np.random.default_rng(4))
    assert w.counts == (2, 1)


def test_word_not_a_basis():
    with pytest.raises(NotABasis):
        geo.loop_word((2, 1), (1, 1), (1, -1), rng=np.random.default_rng(5))


# -- families ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_channel_family():
    return geo.continue_family(catalog.two_channel(), (1, 0), 0.3, 0.9, 13, N=256)


def test_pend0_family_single_branch(pend0):
    fam = geo.continue_family(pend0, (1, 0), 0.1, 2.0, 9, N=256)
    lengths = [row[0].length for row in fam.loops]
    assert np.all(np.diff(lengths) > 0)
    assert fam.bifurcation_energies == []
    assert all(fam.morse_flags)


def test_two_channel_single_crossing(two_channel_family):
    fam = two_channel_family
    assert len(fam.bifurcation_energies) == 1
    E_star = fam.bifurcation_energies[0]
    assert 0.5 < E_star < 0.65
    sa, sb = fam.bifurcation_slopes[0]
    assert abs(sa - sb) > 1e-4  # B3 margin
    # oracle: analytic channel lengths cross at the same energy
    def diff(E):
        l0 = quad(lambda th: math.sqrt(E + 1.1 * (1 - math.cos(th))), 0, TWO_PI)[0]
        return l0 - TWO_PI * math.sqrt(E + 1.0)

    assert diff(E_star - 0.05) < 0 < diff(E_star + 0.05)


def test_envelope_slope_vs_finite_difference(pend0):
    loop = geo.minimize_loop(pend0, (1, 0), 0.8, N=256)
    slope = geo.length_energy_slope(pend0, loop)
    h = 1e-5
    lp = geo.minimize_loop(pend0, (1, 0), 0.8 + h, N=256, seed=loop.points[:-1])
    lm = geo.minimize_loop(pend0, (1, 0), 0.8 - h, N=256, seed=loop.points[:-1])
    fd = (lp.length - lm.length) / (2 * h)
    assert abs(slope - fd) < 1e-5 * (1 + abs(slope))


def test_flat_slope_closed_form():
    flat = catalog.flat()
    loop = geo.minimize_loop(flat, (1, 0), 1.0, N=128)
    # l(E) = 2 pi |h| sqrt(E)  =>  dl/dE = pi |h| / sqrt(E)
    assert abs(geo.length_energy_slope(flat, loop) - math.pi) < 1e-10


def test_flat_morse_degenerate():
    flat = catalog.flat()
    loop = geo.minimize_loop(flat, (1, 0), 1.0, N=128)
    ok, eig, thr = geo.is_morse_nondegenerate(flat, loop)
    assert not ok


# -- orbit conversion --------------------------------------------------------------


def test_loop_to_orbit_flat():
    flat = catalog.flat()
    loop = geo.minimize_loop(flat, (1, 0), 0.5, N=128)
    traj, period = geo.loop_to_orbit(flat, loop)
    assert np.allclose(traj.states[0, 2:], [1.0, 0.0], atol=1e-12)
    assert abs(period - TWO_PI) < 1e-10


def test_loop_to_orbit_closure(pend0):
    loop = geo.minimize_loop(pend0, (1, 0), 0.5, N=512)
    traj, period = geo.loop_to_orbit(pend0, loop)
    assert np.max(np.abs(traj.energies - 0.5)) < 1e-8
    out = flow_slow(pend0, traj.states[0], period, tol=1e-12, samples=4)
    gap = out.states[-1] - traj.states[0] - np.array([TWO_PI, 0, 0, 0])
    assert np.max(np.abs(gap)) < 1e-7


def test_orbit_reversal_symmetry(pend0):
    loop_f = geo.minimize_loop(pend0, (1, 0), 0.5, N=256)
    loop_b = geo.minimize_loop(pend0, (-1, 0), 0.5, N=256)
    tf, _ = geo.loop_to_orbit(pend0, loop_f)
    tb, _ = geo.loop_to_orbit(pend0, loop_b)
    # orbit of -h is the time-reversal image: theta mirrored, I negated
    assert abs(tf.states[0, 2] + tb.states[0, 2]) < 1e-9


def test_degenerate_orbit_conversion(pend0, axis_loop):
    with pytest.raises(DegenerateMetric):
        geo.loop_to_orbit(pend0, axis_loop, 0.0)


def test_refine_periodic_orbit(pend0):
    loop = geo.minimize_loop(pend0, (1, 0), 0.7, N=256)
    traj, period = geo.loop_to_orbit(pend0, loop)
    z, P, M = geo.refine_periodic_orbit(
        pend0, traj.states[0], period, loop.homology
    )
    out = flow_slow(pend0, z, P, tol=1e-12, samples=4)
    gap = out.states[-1] - z - np.array([TWO_PI, 0, 0, 0])
    assert np.max(np.abs(gap)) < 1e-9
    # monodromy is symplectic: reciprocal multiplier pairs
    eigs = np.linalg.eigvals(M)
    prod = np.sort(np.abs(eigs))
    assert abs(prod[0] * prod[3] - 1) < 1e-8
