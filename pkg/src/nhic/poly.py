"""Sparse multivariate polynomials with degree-truncated algebra.

Coefficients may be floats or ``fractions.Fraction`` (exact mode for unit
tests).  Every polynomial carries an optional truncation order ``trunc``:
products and compositions drop monomials above it and propagate the
tightest truncation of the operands, so the order bookkeeping is explicit
rather than implied by callers.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

PRUNE_TOL = 1e-14


def _combine_trunc(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


class SparsePoly:
    """Polynomial stored as exponent-tuple -> coefficient.

    Treated as immutable after construction; numeric evaluation compiles
    the term list to arrays on first use.
    """

    __slots__ = ("nvars", "coeffs", "trunc", "_compiled")

    def __init__(self, nvars, coeffs=None, trunc=None):
        self.nvars = int(nvars)
        self.coeffs = dict(coeffs) if coeffs else {}
        self.trunc = trunc
        self._compiled = None

    # -- constructors --------------------------------------------------------

    @classmethod
    def zero(cls, nvars, trunc=None):
        return cls(nvars, {}, trunc)

    @classmethod
    def constant(cls, nvars, value, trunc=None):
        if value == 0:
            return cls.zero(nvars, trunc)
        return cls(nvars, {(0,) * nvars: value}, trunc)

    @classmethod
    def variable(cls, nvars, index, trunc=None):
        expo = [0] * nvars
        expo[index] = 1
        return cls(nvars, {tuple(expo): 1.0}, trunc)

    # -- bookkeeping ---------------------------------------------------------

    def copy(self):
        return SparsePoly(self.nvars, self.coeffs, self.trunc)

    def degree(self):
        return max((sum(e) for e in self.coeffs), default=0)

    def prune(self, tol=PRUNE_TOL):
        """Drop float coefficients below tol; exact coefficients only if 0."""
        out = {}
        for e, c in self.coeffs.items():
            if isinstance(c, Fraction):
                if c != 0:
                    out[e] = c
            elif abs(c) > tol:
                out[e] = c
        return SparsePoly(self.nvars, out, self.trunc)

    def truncated(self, degree):
        keep = {e: c for e, c in self.coeffs.items() if sum(e) <= degree}
        return SparsePoly(self.nvars, keep, _combine_trunc(self.trunc, degree))

    def graded_parts(self):
        """Dict degree -> homogeneous part."""
        parts = {}
        for e, c in self.coeffs.items():
            parts.setdefault(sum(e), {})[e] = c
        return {
            d: SparsePoly(self.nvars, p, self.trunc) for d, p in parts.items()
        }

    def coefficient(self, expo):
        return self.coeffs.get(tuple(expo), 0.0)

    def as_float(self):
        return SparsePoly(
            self.nvars, {e: float(c) for e, c in self.coeffs.items()}, self.trunc
        )

    def max_abs_coeff(self):
        return max((abs(float(c)) for c in self.coeffs.values()), default=0.0)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, SparsePoly):
            other = SparsePoly.constant(self.nvars, other)
        out = dict(self.coeffs)
        for e, c in other.coeffs.items():
            out[e] = out.get(e, 0) + c
        return SparsePoly(
            self.nvars, out, _combine_trunc(self.trunc, other.trunc)
        ).prune()

    __radd__ = __add__

    def __neg__(self):
        return SparsePoly(
            self.nvars, {e: -c for e, c in self.coeffs.items()}, self.trunc
        )

    def __sub__(self, other):
        if not isinstance(other, SparsePoly):
            other = SparsePoly.constant(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, SparsePoly):
            return SparsePoly(
                self.nvars,
                {e: c * other for e, c in self.coeffs.items()},
                self.trunc,
            ).prune()
        trunc = _combine_trunc(self.trunc, other.trunc)
        out = {}
        for e1, c1 in self.coeffs.items():
            d1 = sum(e1)
            for e2, c2 in other.coeffs.items():
                if trunc is not None and d1 + sum(e2) > trunc:
                    continue
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0) + c1 * c2
        return SparsePoly(self.nvars, out, trunc).prune()

    __rmul__ = __mul__

    def diff(self, index):
        out = {}
        for e, c in self.coeffs.items():
            if e[index] == 0:
                continue
            ee = list(e)
            ee[index] -= 1
            out[tuple(ee)] = out.get(tuple(ee), 0) + c * e[index]
        return SparsePoly(self.nvars, out, self.trunc)

    def pow(self, n):
        # integer identity keeps exact-rational coefficients exact
        result = SparsePoly.constant(self.nvars, 1, self.trunc)
        base = self
        while n > 0:
            if n & 1:
                result = result * base
            base = base * base if n > 1 else base
            n >>= 1
        return result

    # -- evaluation ----------------------------------------------------------

    def _compile(self):
        if self._compiled is None:
            if self.coeffs:
                E = np.array(list(self.coeffs.keys()), dtype=np.int64)
                c = np.array([float(v) for v in self.coeffs.values()])
            else:
                E = np.zeros((0, self.nvars), dtype=np.int64)
                c = np.zeros(0)
            self._compiled = (E, c)
        return self._compiled

    def __call__(self, pts):
        """Evaluate at pts of shape (nvars,) or (m, nvars)."""
        E, c = self._compile()
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            if not len(c):
                return 0.0
            return float((pts[None, :] ** E).prod(axis=1) @ c)
        if not len(c):
            return np.zeros(pts.shape[0])
        return (pts[:, None, :] ** E[None, :, :]).prod(axis=2) @ c

    def subs(self, polys):
        """Substitute polys[i] for variable i (degree-truncated)."""
        trunc = self.trunc
        for p in polys:
            trunc = _combine_trunc(trunc, p.trunc)
        nvars_out = polys[0].nvars
        result = SparsePoly.zero(nvars_out, trunc)
        pow_cache = [{0: SparsePoly.constant(nvars_out, 1.0, trunc)} for _ in polys]

        def var_pow(v, d):
            cache = pow_cache[v]
            if d not in cache:
                cache[d] = var_pow(v, d - 1) * polys[v]
            return cache[d]

        for e, c in sorted(self.coeffs.items(), key=lambda kv: sum(kv[0])):
            term = SparsePoly.constant(nvars_out, c, trunc)
            for v, d in enumerate(e):
                if d:
                    term = term * var_pow(v, d)
            result = result + term
        return result.prune()

    def __repr__(self):
        n = len(self.coeffs)
        return f"SparsePoly(nvars={self.nvars}, terms={n}, trunc={self.trunc})"


class PolyMap:
    """Polynomial map R^n -> R^n given by one SparsePoly per component."""

    def __init__(self, components):
        self.components = list(components)
        self.nvars = self.components[0].nvars

    @property
    def trunc(self):
        t = None
        for p in self.components:
            t = _combine_trunc(t, p.trunc)
        return t

    @classmethod
    def identity(cls, nvars, trunc=None):
        return cls([SparsePoly.variable(nvars, i, trunc) for i in range(nvars)])

    @classmethod
    def from_linear(cls, matrix, trunc=None):
        matrix = np.asarray(matrix)
        n = matrix.shape[0]
        comps = []
        for i in range(n):
            coeffs = {}
            for j in range(n):
                if matrix[i, j] != 0:
                    e = [0] * n
                    e[j] = 1
                    coeffs[tuple(e)] = float(matrix[i, j])
            comps.append(SparsePoly(n, coeffs, trunc))
        return cls(comps)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = np.stack([p(pts) for p in self.components], axis=-1)
        return out[0] if single else out

    def compose(self, inner, trunc=None):
        """self after inner, truncated."""
        comps = [p.subs(inner.components) for p in self.components]
        if trunc is not None:
            comps = [p.truncated(trunc) for p in comps]
        return PolyMap(comps)

    def linear_part(self):
        n = self.nvars
        A = np.zeros((n, n))
        for i, p in enumerate(self.components):
            for j in range(n):
                e = [0] * n
                e[j] = 1
                A[i, j] = float(p.coefficient(e))
        return A

    def nonlinear_part(self):
        comps = []
        for p in self.components:
            keep = {e: c for e, c in p.coeffs.items() if sum(e) >= 2}
            comps.append(SparsePoly(p.nvars, keep, p.trunc))
        return PolyMap(comps)

    def jacobian_polys(self):
        return [
            [p.diff(j) for j in range(self.nvars)] for p in self.components
        ]

    def jacobian(self, pt):
        pt = np.asarray(pt, dtype=float)
        n = self.nvars
        J = np.zeros((n, n))
        for i, p in enumerate(self.components):
            for j in range(n):
                J[i, j] = p.diff(j)(pt)
        return J

    def inverse(self, trunc):
        """Compositional inverse to the given degree.

        Requires an invertible linear part; fixed-point iteration gains one
        degree per sweep, so trunc-1 sweeps suffice.
        """
        A = self.linear_part()
        Ainv = np.linalg.inv(A)
        f = self.nonlinear_part()
        lin_inv = PolyMap.from_linear(Ainv, trunc)
        g = PolyMap([p.truncated(trunc) for p in lin_inv.components])
        ident = PolyMap.identity(self.nvars, trunc)
        for _ in range(max(trunc - 1, 1)):
            fg = f.compose(g, trunc)
            shifted = PolyMap(
                [ident.components[i] - fg.components[i] for i in range(self.nvars)]
            )
            g = lin_inv.compose(shifted, trunc)
        return g

    def __repr__(self):
        return f"PolyMap(nvars={self.nvars}, trunc={self.trunc})"


# The saddle chart machinery works in four phase-space variables; keep the
# contract name visible for that use.
PolynomialMap4 = PolyMap
