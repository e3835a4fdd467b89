"""Sparse polynomial algebra checks, including an exact-rational case."""

from fractions import Fraction

import numpy as np
import pytest

from nhic.poly import PolyMap, SparsePoly


def test_add_mul_eval():
    x = SparsePoly.variable(2, 0)
    y = SparsePoly.variable(2, 1)
    p = (x + 2 * y) * (x - y) + 3
    pts = np.array([[1.0, 2.0], [0.5, -1.0]])
    expect = (pts[:, 0] + 2 * pts[:, 1]) * (pts[:, 0] - pts[:, 1]) + 3
    assert np.allclose(p(pts), expect)


def test_truncation_bookkeeping():
    x = SparsePoly.variable(2, 0, trunc=3)
    p = x.pow(2)
    q = p * p  # degree 4 > trunc
    assert q.coeffs == {}
    assert q.trunc == 3


def test_diff():
    x = SparsePoly.variable(2, 0)
    y = SparsePoly.variable(2, 1)
    p = x.pow(3) * y + 2 * y
    dp = p.diff(0)
    assert dp.coefficient((2, 1)) == 3
    assert p.diff(1).coefficient((3, 0)) == 1


def test_exact_rational_mode():
    x = SparsePoly(2, {(1, 0): Fraction(1, 3)})
    y = SparsePoly(2, {(0, 1): Fraction(1, 7)})
    p = (x + y).pow(2)
    assert p.coefficient((1, 1)) == Fraction(2, 21)


def test_subs_matches_numeric_composition():
    rng = np.random.default_rng(1)
    x = SparsePoly.variable(2, 0, trunc=6)
    y = SparsePoly.variable(2, 1, trunc=6)
    p = x.pow(2) * y - y.pow(3) + x
    inner = [x + 0.3 * y.pow(2), y - 0.2 * x.pow(2)]
    q = p.subs(inner)
    pts = rng.uniform(-0.5, 0.5, (20, 2))
    inner_vals = np.stack([g(pts) for g in inner], axis=-1)
    # truncation error is degree-controlled; keep points small
    assert np.allclose(q(pts), p(inner_vals), atol=1e-3)


def test_map_inverse():
    rng = np.random.default_rng(2)
    A = np.array([[1.0, 0.2, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, -0.1],
                  [0.0, 0.3, 0.0, 1.0]])
    comps = PolyMap.from_linear(A, trunc=5).components
    x = [SparsePoly.variable(4, i, trunc=5) for i in range(4)]
    comps[0] = comps[0] + 0.2 * x[1] * x[2]
    comps[2] = comps[2] + 0.1 * x[0].pow(3)
    F = PolyMap(comps)
    G = F.inverse(5)
    FG = F.compose(G, 5)
    pts = rng.uniform(-0.2, 0.2, (30, 4))
    assert np.max(np.abs(FG(pts) - pts)) < 1e-6


def test_jacobian():
    x = SparsePoly.variable(2, 0)
    y = SparsePoly.variable(2, 1)
    F = PolyMap([x * y, x + y.pow(2)])
    J = F.jacobian(np.array([2.0, 3.0]))
    assert np.allclose(J, [[3.0, 2.0], [1.0, 6.0]])
