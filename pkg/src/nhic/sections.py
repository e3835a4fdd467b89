"""Local sections near the saddle and their energy-restricted geometry.

Sections are the four hyperplanes ``s1 = +/-delta`` and ``u1 = +/-delta``
inside the validity ball.  Restricted to an energy surface each section is
two-dimensional and globally parametrized by ``(s2, u2)``; the remaining
coordinate (``u1`` on s-sections, ``s1`` on u-sections) is solved from the
energy equation.  Cones use the linear-ratio convention

    C^{u,c} = { |(v_s1, v_s2, v_u1)| < c |v_u2| },
    C^{s,c} = { |(v_s1, v_u1, v_u2)| < c |v_s2| }.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CurveEscaped, EmptyRestrictedCone

S_PLUS, S_MINUS, U_PLUS, U_MINUS = "s_plus", "s_minus", "u_plus", "u_minus"
_KINDS = (S_PLUS, S_MINUS, U_PLUS, U_MINUS)


@dataclass
class SectionSpec:
    """One of the four local sections."""

    kind: str
    offset_delta: float
    box_radius_r: float

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if not (0 < self.offset_delta < self.box_radius_r / 2):
            raise ValueError("need 0 < offset_delta < box_radius_r / 2")

    @property
    def axis(self):
        """Index of the frozen coordinate (s1 or u1)."""
        return 0 if self.kind.startswith("s") else 2

    @property
    def sign(self):
        return 1.0 if self.kind.endswith("plus") else -1.0

    @property
    def value(self):
        return self.sign * self.offset_delta

    @property
    def conj_axis(self):
        """Coordinate solved from the energy equation (u1 or s1)."""
        return 2 if self.axis == 0 else 0

    def event(self, w):
        return w[self.axis] - self.value

    def contains(self, w, tol=1e-9):
        return abs(w[self.axis] - self.value) < tol


class SectionSurface:
    """Energy-restricted section with the (s2, u2) parametrization.

    ``energy_fn``/``energy_grad`` evaluate the conserved quantity and its
    4D gradient; the polynomial normal-form energy and the transported
    true energy both fit this interface.
    """

    def __init__(self, section, energy, energy_fn, energy_grad, rates):
        self.section = section
        self.energy = float(energy)
        self.energy_fn = energy_fn
        self.energy_grad = energy_grad
        self.rates = rates  # (lambda1, lambda2)

    # -- embedding -------------------------------------------------------------

    def initial_conjugate_guess(self):
        lam1 = self.rates[0]
        return self.energy / (lam1 * self.section.value)

    def embed(self, p, conj_guess=None, tol=1e-13, maxit=60):
        """4D point with coordinates (s2, u2) = p on the surface."""
        s2, u2 = float(p[0]), float(p[1])
        j = self.section.conj_axis
        w = np.zeros(4)
        w[self.section.axis] = self.section.value
        w[1], w[3] = s2, u2
        w[j] = self.initial_conjugate_guess() if conj_guess is None else conj_guess
        for _ in range(maxit):
            r = self.energy_fn(w) - self.energy
            if abs(r) < tol * (1.0 + abs(self.energy)):
                return w
            g = self.energy_grad(w)[j]
            if abs(g) < 1e-15:
                raise EmptyRestrictedCone(
                    f"energy equation degenerate on {self.section.kind}"
                )
            w[j] -= r / g
        raise EmptyRestrictedCone(
            f"conjugate coordinate solve failed on {self.section.kind}"
        )

    def project(self, w):
        return np.array([w[1], w[3]])

    def implicit_derivatives(self, w):
        """(d1, d2): derivatives of the conjugate coordinate wrt (s2, u2)."""
        g = self.energy_grad(w)
        gj = g[self.section.conj_axis]
        if abs(gj) < 1e-15:
            raise EmptyRestrictedCone("degenerate tangent on section surface")
        return -g[1] / gj, -g[3] / gj

    def tangent_basis(self, w):
        """4D vectors t1 = d(embed)/ds2, t2 = d(embed)/du2."""
        d1, d2 = self.implicit_derivatives(w)
        j = self.section.conj_axis
        t1 = np.zeros(4)
        t2 = np.zeros(4)
        t1[1], t1[j] = 1.0, d1
        t2[3], t2[j] = 1.0, d2
        return t1, t2

    def tangent_from_plane(self, w, ab):
        t1, t2 = self.tangent_basis(w)
        return ab[0] * t1 + ab[1] * t2

    def plane_components(self, v):
        """(a, b) components of a surface-tangent 4D vector."""
        return np.array([v[1], v[3]])

    # -- restricted cones --------------------------------------------------------

    def cone_gap(self, w, variant):
        """Best achievable ratio |rest| / |dominant| inside the surface.

        The restricted cone of aperture c is nonempty iff this gap < c.
        """
        d1, d2 = self.implicit_derivatives(w)
        if variant == "stable":
            return abs(d1) / math.sqrt(1.0 + d2 * d2)
        return abs(d2) / math.sqrt(1.0 + d1 * d1)

    def cone_midline(self, w, variant):
        """Surface-tangent unit 4D vector minimizing the cone ratio."""
        d1, d2 = self.implicit_derivatives(w)
        t1, t2 = self.tangent_basis(w)
        if variant == "stable":
            b = -d1 * d2 / (1.0 + d2 * d2)
            v = t1 + b * t2
        else:
            a = -d1 * d2 / (1.0 + d1 * d1)
            v = a * t1 + t2
        return v / np.linalg.norm(v)

    def restricted_cone_nonempty(self, w, c, variant):
        return self.cone_gap(w, variant) < c


def cone_ratio(v, variant):
    """|rest| / |dominant| for a 4D tangent vector; < c means inside C^{.,c}."""
    v = np.asarray(v, dtype=float)
    if variant == "unstable":
        dom = abs(v[3])
        rest = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    else:
        dom = abs(v[1])
        rest = math.sqrt(v[0] ** 2 + v[2] ** 2 + v[3] ** 2)
    if dom == 0.0:
        return math.inf
    return rest / dom


def in_cone(v, c, variant):
    return cone_ratio(v, variant) < c


def integrate_cone_curve(surface, start_plane, arc_length, variant,
                         n_steps=64, r_limit=None, c_check=None):
    """Integral curve of the cone midline field on the section surface.

    Fixed-step RK4 in the (s2, u2) chart with direction continuity; returns
    sampled plane points for arc parameters in [-arc_length, arc_length].
    """
    def field(p, prev):
        w = surface.embed(p)
        if c_check is not None and not surface.restricted_cone_nonempty(
            w, c_check, variant
        ):
            raise EmptyRestrictedCone(
                f"restricted {variant} cone empty along side curve"
            )
        v = surface.cone_midline(w, variant)
        ab = surface.plane_components(v)
        norm = np.linalg.norm(ab)
        ab = ab / norm
        if prev is not None and np.dot(ab, prev) < 0:
            ab = -ab
        if r_limit is not None and np.linalg.norm(w) > r_limit:
            raise CurveEscaped("side curve left the validity ball")
        return ab

    def run(sign):
        pts = [np.asarray(start_plane, dtype=float)]
        h = sign * arc_length / n_steps
        prev = None
        p = pts[0]
        for _ in range(n_steps):
            k1 = field(p, prev)
            k2 = field(p + 0.5 * h * k1, k1)
            k3 = field(p + 0.5 * h * k2, k1)
            k4 = field(p + h * k3, k1)
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            prev = step / np.linalg.norm(step)
            p = p + h * step
            pts.append(p)
        return pts

    backward = run(-1.0)
    forward = run(+1.0)
    pts = backward[::-1] + forward[1:]
    params = np.linspace(-arc_length, arc_length, len(pts))
    return params, np.array(pts)


@dataclass
class BilinearFrame:
    """Bilinear (a, b) chart of a curvilinear quadrilateral from its corners.

    Corner order: (a, b) = (-1,-1), (+1,-1), (+1,+1), (-1,+1).
    """

    corners: np.ndarray  # (4, 2)

    def to_plane(self, ab):
        a, b = ab
        c = self.corners
        w = np.array(
            [(1 - a) * (1 - b), (1 + a) * (1 - b), (1 + a) * (1 + b), (1 - a) * (1 + b)]
        ) / 4.0
        return w @ c

    def to_ab(self, p, tol=1e-13, maxit=50):
        p = np.asarray(p, dtype=float)
        ab = np.zeros(2)
        for _ in range(maxit):
            r = self.to_plane(ab) - p
            if np.linalg.norm(r) < tol * (1.0 + np.linalg.norm(p)):
                return ab
            J = self._jac(ab)
            ab = ab - np.linalg.solve(J, r)
        return ab

    def _jac(self, ab):
        a, b = ab
        c = self.corners
        da = (-(1 - b) * c[0] + (1 - b) * c[1] + (1 + b) * c[2] - (1 + b) * c[3]) / 4.0
        db = (-(1 - a) * c[0] - (1 + a) * c[1] + (1 + a) * c[2] + (1 - a) * c[3]) / 4.0
        return np.column_stack([da, db])
