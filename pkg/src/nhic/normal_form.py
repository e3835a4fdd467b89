"""Polynomial normal form at the saddle of the slow system.

Pipeline: symplectic linear diagonalization (``systems.linearize_at_origin``),
straightening of the stable/unstable manifolds by two symplectic shears
solved order-by-order from Hamilton-Jacobi equations, then resonant
normalization by Lie transforms.  The result is a polynomial Hamiltonian
``N`` of degree ``k`` containing only resonant monomials (those with
``sum_i lambda_i (alpha_i - beta_i) = 0`` for ``u^alpha s^beta``), a chart
from the original slow coordinates with its inverse to the same degree, and
a measured remainder on a validity ball.

Saddle variables are ordered ``(s1, s2, u1, u2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoValidRadius, OrderSolveFailure, SmallDivisor
from .poly import PolyMap, SparsePoly
from .systems import SaddleSpectrum, linearize_at_origin

_S1, _S2, _U1, _U2 = range(4)


def poisson(f, g):
    """Poisson bracket with the convention dF/dt = {F, H} for the flow
    s' = -dH/du, u' = dH/ds."""
    out = SparsePoly.zero(4, trunc=f.trunc if f.trunc is not None else g.trunc)
    for i in range(2):
        out = out + f.diff(_U1 + i) * g.diff(_S1 + i) - f.diff(_S1 + i) * g.diff(_U1 + i)
    return out


def divisor(expo, lam1, lam2):
    """sum_i lambda_i (alpha_i - beta_i) for the monomial s^beta u^alpha."""
    beta = (expo[_S1], expo[_S2])
    alpha = (expo[_U1], expo[_U2])
    return lam1 * (alpha[0] - beta[0]) + lam2 * (alpha[1] - beta[1])


def is_exactly_resonant(expo, relation):
    """Resonance decided by integer structure rather than small floats."""
    d1 = expo[_U1] - expo[_S1]
    d2 = expo[_U2] - expo[_S2]
    if d1 == 0 and d2 == 0:
        return True
    if relation is not None:
        p, q = relation  # q*lambda2 == p*lambda1
        return q * d1 + p * d2 == 0
    return False


@dataclass
class Chart:
    """Polynomial coordinate change with its truncated inverse."""

    forward: PolyMap  # old -> new
    inverse: PolyMap  # new -> old

    def compose(self, inner):
        """self after inner (inner applied first)."""
        trunc = self.forward.trunc
        return Chart(
            forward=self.forward.compose(inner.forward, trunc),
            inverse=inner.inverse.compose(self.inverse, trunc),
        )


@dataclass
class NormalFormChart:
    """Saddle normal form: chart, polynomial Hamiltonian, validity data."""

    spectrum: SaddleSpectrum
    chart: Chart  # original slow coordinates (theta, I) -> (s1, s2, u1, u2)
    N: SparsePoly
    degree_k: int
    domain_radius_r: float = 0.0
    remainder_bound: float = 0.0
    contraction_scale: float = 0.0  # C' of the validity-ball bound
    slow = None

    def __post_init__(self):
        lam1, lam2 = self.spectrum.lambda1, self.spectrum.lambda2
        self._field = PolyMap(
            [
                -self.N.diff(_U1),
                -self.N.diff(_U2),
                self.N.diff(_S1),
                self.N.diff(_S2),
            ]
        )
        lin = np.diag([-lam1, -lam2, lam1, lam2])
        self._nonlin = PolyMap(
            [
                self._field.components[i]
                - PolyMap.from_linear(lin).components[i]
                for i in range(4)
            ]
        )
        self._jac_polys = self._field.jacobian_polys()

    # -- dynamics of the truncated field --------------------------------------

    def field(self, w):
        return self._field(w)

    def field_jacobian(self, w):
        w = np.asarray(w, dtype=float)
        return np.array([[p(w) for p in row] for row in self._jac_polys])

    def rhs(self, t, w):
        return self._field(w)

    def nonlinear_parts(self):
        """(F1, F2, G1, G2): nonlinear components of the vector field."""
        return tuple(self._nonlin.components)

    def energy(self, w):
        return self.N(w)

    # -- chart transport -------------------------------------------------------

    def to_saddle(self, z):
        return self.chart.forward(z)

    def from_saddle(self, w):
        return self.chart.inverse(w)

    @classmethod
    def linear(cls, lam1, lam2, degree=3):
        """Purely linear model N = lam1 s1 u1 + lam2 s2 u2 (test fixture)."""
        cols = np.zeros((4, 4))
        for i, lam in enumerate((lam1, lam2)):
            a = np.zeros(2)
            a[i] = 1.0
            alpha = 1.0 / math.sqrt(2.0 * lam)
            cols[:, i] = alpha * np.concatenate([a, -lam * a])
            cols[:, 2 + i] = -alpha * np.concatenate([a, lam * a])
        from .systems import detect_rational_relation

        spec = SaddleSpectrum(
            lam1, lam2, cols,
            rational_relation=detect_rational_relation(lam1, lam2),
        )
        N = SparsePoly(
            4, {(1, 0, 1, 0): lam1, (0, 1, 0, 1): lam2}, trunc=degree
        )
        Cinv = np.linalg.inv(cols)
        chart = Chart(
            forward=PolyMap.from_linear(Cinv, trunc=degree),
            inverse=PolyMap.from_linear(cols, trunc=degree),
        )
        nf = cls(spectrum=spec, chart=chart, N=N, degree_k=degree)
        nf.domain_radius_r = 1.0
        return nf


@dataclass
class StructureReport:
    """Coefficientwise structure checks of the normal form."""

    vanishes_on_stable_plane: float   # largest pure-u coefficient
    vanishes_on_unstable_plane: float  # largest pure-s coefficient
    field_class_defects: dict         # component -> largest offending coeff
    nonresonant_residual: float       # largest non-resonant coefficient
    offenders: list
    tol: float = 1e-12

    @property
    def passed(self):
        return (
            self.vanishes_on_stable_plane <= self.tol
            and self.vanishes_on_unstable_plane <= self.tol
            and all(v <= self.tol for v in self.field_class_defects.values())
            and self.nonresonant_residual <= self.tol
        )


# ---------------------------------------------------------------------------
# Straightening
# ---------------------------------------------------------------------------


def _euler_solve(residual_part, var_offset, lam1, lam2):
    """Solve (lam . alpha) g_alpha = -r_alpha for a homogeneous pure part."""
    coeffs = {}
    for e, c in residual_part.coeffs.items():
        a = (e[var_offset], e[var_offset + 1])
        div = lam1 * a[0] + lam2 * a[1]
        if abs(div) < 1e-14:
            raise OrderSolveFailure(f"singular homological divisor at {e}")
        coeffs[e] = -c / div
    return SparsePoly(4, coeffs, trunc=residual_part.trunc)


def _graph_generating_function(H, lam1, lam2, degree, which):
    """Scalar generating function of the invariant-manifold graph.

    which='unstable': solve H(grad_u w(u), u) = 0 for w(u) (graph s = S(u));
    which='stable':   solve H(s, grad_s v(s)) = 0 for v(s) (graph u = U(s)).
    """
    offset = _U1 if which == "unstable" else _S1
    w = SparsePoly.zero(4, trunc=degree)
    for d in range(3, degree + 1):
        g1 = w.diff(offset)
        g2 = w.diff(offset + 1)
        if which == "unstable":
            comps = [g1, g2,
                     SparsePoly.variable(4, _U1, degree),
                     SparsePoly.variable(4, _U2, degree)]
        else:
            comps = [SparsePoly.variable(4, _S1, degree),
                     SparsePoly.variable(4, _S2, degree),
                     g1, g2]
        residual = H.subs(comps).graded_parts().get(d)
        if residual is None or not residual.coeffs:
            continue
        w = w + _euler_solve(residual, offset, lam1, lam2)
    return w


def _shear_charts(w, which, degree):
    """Symplectic shear subtracting a Lagrangian graph.

    which='unstable': (s, u) -> (s - grad_u w, u); 'stable' shifts u by
    grad_s w.  Both inverses are exact.
    """
    xs = [SparsePoly.variable(4, i, degree) for i in range(4)]
    if which == "unstable":
        g = [w.diff(_U1), w.diff(_U2)]
        fwd = PolyMap([xs[0] - g[0], xs[1] - g[1], xs[2], xs[3]])
        inv = PolyMap([xs[0] + g[0], xs[1] + g[1], xs[2], xs[3]])
    else:
        g = [w.diff(_S1), w.diff(_S2)]
        fwd = PolyMap([xs[0], xs[1], xs[2] - g[0], xs[3] - g[1]])
        inv = PolyMap([xs[0], xs[1], xs[2] + g[0], xs[3] + g[1]])
    return Chart(forward=fwd, inverse=inv)


def straighten_manifolds(slow, spectrum, degree):
    """Chart flattening both invariant manifolds onto coordinate planes.

    Returns the chart from the *linearized* saddle coordinates to the
    straightened ones; the transformed Hamiltonian has no pure-s and no
    pure-u monomials up to the requested degree.
    """
    chart, H = _straighten(slow, spectrum, degree)
    return chart


def _linearized_hamiltonian(slow, spectrum, degree):
    H_zI = slow.hamiltonian_taylor(degree)
    lin = PolyMap.from_linear(spectrum.eigenbasis, trunc=degree)
    return H_zI.subs(lin.components).prune()


def straighten_hamiltonian(H_local, lam1, lam2, degree):
    """Straightening for an explicit Hamiltonian already in linearized
    saddle coordinates (quadratic part lam1 s1 u1 + lam2 s2 u2)."""
    w_u = _graph_generating_function(H_local, lam1, lam2, degree, "unstable")
    ch1 = _shear_charts(w_u, "unstable", degree)
    H1 = H_local.subs(ch1.inverse.components).prune()
    w_s = _graph_generating_function(H1, lam1, lam2, degree, "stable")
    ch2 = _shear_charts(w_s, "stable", degree)
    H2 = H1.subs(ch2.inverse.components).prune()
    return ch2.compose(ch1), H2


def _straighten(slow, spectrum, degree):
    H = _linearized_hamiltonian(slow, spectrum, degree)
    return straighten_hamiltonian(H, spectrum.lambda1, spectrum.lambda2, degree)


# ---------------------------------------------------------------------------
# Resonant normalization
# ---------------------------------------------------------------------------


def _lie_transform_poly(f, chi, trunc):
    """f composed with the time-1 flow of chi: sum_j ad_chi^j f / j!."""
    total = f
    term = f
    j = 0
    while True:
        j += 1
        term = poisson(term, chi) * (1.0 / j)
        term = term.truncated(trunc).prune()
        if not term.coeffs:
            break
        total = total + term
        if j > 2 * trunc:
            break
    return total.truncated(trunc).prune()


def _flow_chart_of_generator(chi, trunc):
    """Chart whose inverse is the time-1 flow map of chi."""
    xs = [SparsePoly.variable(4, i, trunc) for i in range(4)]
    inv = PolyMap([_lie_transform_poly(x, chi, trunc) for x in xs])
    fwd = PolyMap([_lie_transform_poly(x, -chi, trunc) for x in xs])
    return Chart(forward=fwd, inverse=inv)


def resonant_normalize(H_local, spectrum, k, tau_res=None):
    """Kill every non-resonant monomial of degree 3..k by Lie transforms.

    ``H_local`` must already be linearized and straightened.  Exact
    low-order rational relations of the spectrum keep their resonant
    monomials; a divisor below ``tau_res`` on a monomial that is not
    exactly resonant raises ``SmallDivisor``.
    """
    lam1, lam2 = spectrum.lambda1, spectrum.lambda2
    if tau_res is None:
        tau_res = 1e-9 * (lam1 + lam2)
    relation = spectrum.rational_relation

    H = H_local.truncated(k).prune()
    ident = PolyMap.identity(4, k)
    chart = Chart(forward=ident, inverse=PolyMap.identity(4, k))

    for d in range(3, k + 1):
        part = H.graded_parts().get(d)
        if part is None or not part.coeffs:
            continue
        chi_coeffs = {}
        for e, c in part.coeffs.items():
            if is_exactly_resonant(e, relation):
                continue
            div = divisor(e, lam1, lam2)
            if abs(div) < tau_res:
                raise SmallDivisor(
                    f"divisor {div:.3e} below tolerance for monomial {e}",
                    exponent=e,
                    divisor=div,
                )
            chi_coeffs[e] = c / div
        if not chi_coeffs:
            continue
        chi = SparsePoly(4, chi_coeffs, trunc=k)
        H = _lie_transform_poly(H, chi, k)
        chart = _flow_chart_of_generator(chi, k).compose(chart)

    return H.prune(), chart


def verify_structure(nf, tol=1e-12):
    """Coefficientwise checks of the normal-form structure."""
    N = nf.N
    lam1, lam2 = nf.spectrum.lambda1, nf.spectrum.lambda2
    relation = nf.spectrum.rational_relation
    pure_u = 0.0
    pure_s = 0.0
    nonres = 0.0
    offenders = []
    for e, c in N.coeffs.items():
        s_deg = e[_S1] + e[_S2]
        u_deg = e[_U1] + e[_U2]
        if s_deg == 0:
            pure_u = max(pure_u, abs(c))
            if abs(c) > tol:
                offenders.append(("pure_u", e, c))
        if u_deg == 0:
            pure_s = max(pure_s, abs(c))
            if abs(c) > tol:
                offenders.append(("pure_s", e, c))
        if not is_exactly_resonant(e, relation) and abs(c) > tol:
            nonres = max(nonres, abs(c))
            offenders.append(("nonresonant", e, c))

    F1, F2, G1, G2 = nf.nonlinear_parts()
    defects = {"F1": 0.0, "F2": 0.0, "G1": 0.0, "G2": 0.0}
    for e, c in F1.coeffs.items():
        if e[_S1] + e[_S2] == 0:
            defects["F1"] = max(defects["F1"], abs(c))
            offenders.append(("F1", e, c))
    for e, c in F2.coeffs.items():
        if not (e[_S2] >= 1 or e[_S1] >= 2):
            defects["F2"] = max(defects["F2"], abs(c))
            offenders.append(("F2", e, c))
    for e, c in G1.coeffs.items():
        if e[_U1] + e[_U2] == 0:
            defects["G1"] = max(defects["G1"], abs(c))
            offenders.append(("G1", e, c))
    for e, c in G2.coeffs.items():
        if not (e[_U2] >= 1 or e[_U1] >= 2):
            defects["G2"] = max(defects["G2"], abs(c))
            offenders.append(("G2", e, c))

    return StructureReport(
        vanishes_on_stable_plane=pure_u,
        vanishes_on_unstable_plane=pure_s,
        field_class_defects=defects,
        nonresonant_residual=nonres,
        offenders=offenders,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Domain radius and remainder
# ---------------------------------------------------------------------------


def _ball_samples(radius, n, rng):
    x = rng.normal(size=(n, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    radii = radius * rng.uniform(0, 1, size=n) ** 0.25
    return x * radii[:, None]


def contraction_scale(nf, r, n=400, seed=0):
    """C'(r): smallest constant seen for the vector-field derivative bounds
    of the contraction estimate, sampled on the ball of radius r."""
    rng = np.random.default_rng(seed)
    pts = _ball_samples(r, n, rng)
    norms = np.linalg.norm(pts, axis=1)
    keep = norms > r * 1e-3
    pts, norms = pts[keep], norms[keep]
    best = 0.0
    jac_rows = [
        [p.diff(j) for j in range(4)] for p in nf._nonlin.components
    ]
    J = np.stack(
        [np.stack([poly(pts) for poly in row], axis=-1) for row in jac_rows],
        axis=1,
    )  # (m, 4, 4)
    ratios = np.linalg.norm(J, axis=(1, 2)) / norms
    best = float(np.max(ratios)) if len(ratios) else 0.0
    # the u-derivative of the s-equations must scale with |s| alone
    s_norm = np.linalg.norm(pts[:, :2], axis=1)
    mask = s_norm > r * 1e-2
    if np.any(mask):
        dF_du = np.linalg.norm(J[mask][:, :2, 2:], axis=(1, 2))
        best = max(best, float(np.max(dF_du / s_norm[mask])))
    u_norm = np.linalg.norm(pts[:, 2:], axis=1)
    mask = u_norm > r * 1e-2
    if np.any(mask):
        dG_ds = np.linalg.norm(J[mask][:, 2:, :2], axis=(1, 2))
        best = max(best, float(np.max(dG_ds / u_norm[mask])))
    return best


def choose_domain_radius(nf, eta, r_max=1.0, r_min=1e-4, seed=0):
    """Largest dyadic radius with C'(r) * r <= eta / 4."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    r = r_max
    while r >= r_min:
        c_prime = contraction_scale(nf, r, seed=seed)
        if c_prime * r <= eta / 4.0:
            nf.domain_radius_r = r
            nf.contraction_scale = c_prime
            return r
        r *= 0.5
    raise NoValidRadius(f"no radius above {r_min:g} satisfies the bound")


def measure_remainder(nf, slow, radius=None, n=10000, seed=0):
    """Sampled sup of |H_slow(chart^{-1}(w)) - N(w)| on the validity ball."""
    r = radius if radius is not None else nf.domain_radius_r
    rng = np.random.default_rng(seed)
    w = _ball_samples(r, n, rng)
    z = nf.chart.inverse(w)
    vals = np.abs(slow.energy(z) - nf.N(w))
    return float(np.max(vals))


def remainder_slope(nf, slow, radii=None, n=2000, seed=0):
    """Log-log slope of the remainder against the sampling radius."""
    if radii is None:
        r0 = nf.domain_radius_r or 0.25
        radii = r0 * 2.0 ** (-np.arange(5, dtype=float))
    sups = [measure_remainder(nf, slow, r, n=n, seed=seed) for r in radii]
    slope = np.polyfit(np.log(radii), np.log(sups), 1)[0]
    return float(slope), list(zip(radii, sups))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def build_normal_form(slow, degree=5, eta=None, r_max=1.0, seed=0):
    """Full normal-form pipeline for a slow system satisfying the saddle
    assumptions."""
    spectrum = linearize_at_origin(slow)
    if eta is None:
        eta = min(spectrum.lambda1, spectrum.lambda2 - spectrum.lambda1) / 10.0
    straight_chart, H_straight = _straighten(slow, spectrum, degree)
    N, norm_chart = resonant_normalize(H_straight, spectrum, degree)
    lin_chart = Chart(
        forward=PolyMap.from_linear(np.linalg.inv(spectrum.eigenbasis), degree),
        inverse=PolyMap.from_linear(spectrum.eigenbasis, degree),
    )
    chart = norm_chart.compose(straight_chart).compose(lin_chart)
    nf = NormalFormChart(spectrum=spectrum, chart=chart, N=N, degree_k=degree)
    nf.slow = slow
    choose_domain_radius(nf, eta, r_max=r_max, seed=seed)
    nf.remainder_bound = measure_remainder(nf, slow, seed=seed)
    return nf
