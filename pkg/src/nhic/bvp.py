"""Two-point boundary value problem at the saddle and the local-map geometry.

``solve_saddle_bvp`` prescribes the incoming stable components at t = 0 and
the outgoing unstable components at t = T and iterates the exponential
integral operator (Picard sweeps with an exponentially weighted cubic
quadrature) until the sup-norm update drops below tolerance.  Every accepted
solution carries a report of the envelope bounds

    |s1 - e^{-l1 t} s1_in|  <= delta e^{-(l1-eta) t}
    |s2 - e^{-l2 t} s2_in|  <= delta e^{-(l2'-2 eta) t},   l2' = min(l2, 2 l1)

(with the mirrored u-bounds in T - t), the two lower bounds with factor 1/2,
and sign preservation of s1 and u1.

The module also evaluates local section maps by direct integration and
constructs the isolation rectangles used by the covering certificates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.signal import lfilter

from .errors import (
    EmptyRestrictedCone,
    EscapedDomain,
    InsufficientSpread,
    MaxTimeExceeded,
    NoContraction,
    ToleranceStall,
)
from .normal_form import NormalFormChart
from .sections import (
    BilinearFrame,
    SectionSpec,
    SectionSurface,
    cone_ratio,
    integrate_cone_curve,
)

# ---------------------------------------------------------------------------
# exponentially weighted cubic quadrature
# ---------------------------------------------------------------------------


def _moments(z, pmax=3):
    """M_p = int_0^1 e^{-z(1-x)} x^p dx, stable for small z."""
    out = np.empty(pmax + 1)
    if z < 0.5:
        for p in range(pmax + 1):
            term = 1.0 / (p + 1)
            total = term
            j = 0
            while abs(term) > 1e-19:
                j += 1
                term *= -z / (p + j + 1)
                total += term
            out[p] = total
    else:
        out[0] = -math.expm1(-z) / z
        for p in range(1, pmax + 1):
            out[p] = (1.0 - p * out[p - 1]) / z
    return out


_STENCILS = {"first": (0.0, 1.0, 2.0, 3.0),
             "interior": (-1.0, 0.0, 1.0, 2.0),
             "last": (-2.0, -1.0, 0.0, 1.0)}


def _stencil_weights(z, kind):
    nodes = np.array(_STENCILS[kind])
    V = np.vander(nodes, 4, increasing=True)  # V[r, p] = x_r^p
    M = _moments(z)
    return np.linalg.solve(V.T, M)


def _exp_cumint(F, dt, lam):
    """I_j = int_0^{t_j} e^{lam (xi - t_j)} F(xi) dxi on a uniform grid."""
    n = len(F)
    z = lam * dt
    w_int = _stencil_weights(z, "interior")
    w_first = _stencil_weights(z, "first")
    w_last = _stencil_weights(z, "last")
    q = np.zeros(n - 1)
    if n >= 4:
        # interior segments j = 2 .. n-2 use nodes (j-2, j-1, j, j+1)
        q[1:-1] = dt * (
            w_int[0] * F[0:-3] + w_int[1] * F[1:-2]
            + w_int[2] * F[2:-1] + w_int[3] * F[3:]
        )
        q[0] = dt * (w_first @ F[:4])
        q[-1] = dt * (w_last @ F[-4:])
    else:
        # degenerate tiny grids: trapezoid fallback
        for j in range(1, n):
            q[j - 1] = dt * 0.5 * (F[j - 1] * math.exp(-z) + F[j])
    decay = math.exp(-z)
    I = lfilter([1.0], [1.0, -decay], q)
    return np.concatenate([[0.0], I])


def _exp_cumint_rev(G, dt, lam):
    """J_j = int_{t_j}^{T} e^{-lam (xi - t_j)} G(xi) dxi."""
    return _exp_cumint(G[::-1], dt, lam)[::-1]


# ---------------------------------------------------------------------------
# solution containers
# ---------------------------------------------------------------------------


@dataclass
class EnvelopeReport:
    """Margins (bound minus deviation, worst node) of the saddle estimates."""

    upper_margins: dict
    lower_margins: dict
    lower_applicable: dict
    sign_preserved: bool
    eta: float
    delta: float
    lambda2_eff: float

    @property
    def passed(self):
        ok_upper = all(v >= 0.0 for v in self.upper_margins.values())
        ok_lower = all(
            (not self.lower_applicable[k]) or v >= 0.0
            for k, v in self.lower_margins.items()
        )
        return ok_upper and ok_lower and self.sign_preserved


@dataclass
class BvpSolution:
    """Discretized saddle passage with boundary data (s_in at 0, u_out at T)."""

    T: float
    s_in: np.ndarray
    u_out: np.ndarray
    t: np.ndarray
    states: np.ndarray  # (n, 4): s1, s2, u1, u2
    energy: float
    energy_spread: float
    iteration_count: int
    residual: float
    updates: list
    update_ratios: list
    envelope: EnvelopeReport | None = None
    grid_levels: int = 1

    @property
    def entry_point(self):
        return self.states[0]

    @property
    def exit_point(self):
        return self.states[-1]

    def write_csv(self, path):
        data = np.column_stack([self.t, self.states])
        np.savetxt(
            path, data, delimiter=",", header="t,s1,s2,u1,u2",
            comments="", fmt="%.17g",
        )


def _picard(nf, s_in, u_out, T, n, tol_update, max_sweeps):
    lam1, lam2 = nf.spectrum.lambda1, nf.spectrum.lambda2
    F1, F2, G1, G2 = nf.nonlinear_parts()
    t = np.linspace(0.0, T, n)
    dt = t[1] - t[0]
    decay_s1 = np.exp(-lam1 * t)
    decay_s2 = np.exp(-lam2 * t)
    decay_u1 = np.exp(-lam1 * (T - t))
    decay_u2 = np.exp(-lam2 * (T - t))

    states = np.column_stack(
        [s_in[0] * decay_s1, s_in[1] * decay_s2,
         u_out[0] * decay_u1, u_out[1] * decay_u2]
    )
    updates = []
    stalled_high = 0
    for sweep in range(1, max_sweeps + 1):
        f1 = F1(states)
        f2 = F2(states)
        g1 = G1(states)
        g2 = G2(states)
        new = np.column_stack(
            [
                s_in[0] * decay_s1 + _exp_cumint(f1, dt, lam1),
                s_in[1] * decay_s2 + _exp_cumint(f2, dt, lam2),
                u_out[0] * decay_u1 - _exp_cumint_rev(g1, dt, lam1),
                u_out[1] * decay_u2 - _exp_cumint_rev(g2, dt, lam2),
            ]
        )
        update = float(np.max(np.abs(new - states)))
        states = new
        if len(updates) and updates[-1] > 10 * tol_update:
            if update / updates[-1] >= 0.95:
                stalled_high += 1
                if stalled_high >= 5:
                    raise NoContraction(
                        f"update ratio >= 0.95 for 5 sweeps (delta too large); "
                        f"last update {update:.3e}"
                    )
            else:
                stalled_high = 0
        updates.append(update)
        if update < tol_update:
            ratios = [
                updates[k + 1] / updates[k]
                for k in range(len(updates) - 1)
                if updates[k] > 10 * tol_update
            ]
            return t, states, sweep, update, updates, ratios
    raise ToleranceStall(
        f"no convergence after {max_sweeps} sweeps; last update {updates[-1]:.3e}"
    )


def check_envelope(nf, t, states, s_in, u_out, T, eta, delta):
    lam1, lam2 = nf.spectrum.lambda1, nf.spectrum.lambda2
    lam2p = nf.spectrum.lambda2_eff
    dev = np.abs(
        states
        - np.column_stack(
            [
                s_in[0] * np.exp(-lam1 * t),
                s_in[1] * np.exp(-lam2 * t),
                u_out[0] * np.exp(-lam1 * (T - t)),
                u_out[1] * np.exp(-lam2 * (T - t)),
            ]
        )
    )
    bounds = np.column_stack(
        [
            delta * np.exp(-(lam1 - eta) * t),
            delta * np.exp(-(lam2p - 2 * eta) * t),
            delta * np.exp(-(lam1 - eta) * (T - t)),
            delta * np.exp(-(lam2p - 2 * eta) * (T - t)),
        ]
    )
    names = ("s1", "s2", "u1", "u2")
    upper = {
        nm: float(np.min(bounds[:, i] - dev[:, i])) for i, nm in enumerate(names)
    }
    lower = {
        "s1": float(
            np.min(
                np.abs(states[:, 0])
                - 0.5 * abs(s_in[0]) * np.exp(-(lam1 + eta) * t)
            )
        ),
        "u1": float(
            np.min(
                np.abs(states[:, 2])
                - 0.5 * abs(u_out[0]) * np.exp(-(lam1 + eta) * (T - t))
            )
        ),
    }
    applicable = {
        "s1": abs(s_in[0]) >= delta / 4.0,
        "u1": abs(u_out[0]) >= delta / 4.0,
    }
    signs_ok = bool(
        np.all(np.sign(states[:, 0]) == np.sign(s_in[0]))
        and np.all(np.sign(states[:, 2]) == np.sign(u_out[0]))
    ) if s_in[0] != 0 and u_out[0] != 0 else True
    return EnvelopeReport(
        upper_margins=upper,
        lower_margins=lower,
        lower_applicable=applicable,
        sign_preserved=signs_ok,
        eta=eta,
        delta=delta,
        lambda2_eff=lam2p,
    )


def solve_saddle_bvp(
    nf,
    s_in,
    u_out,
    T,
    eta=None,
    delta=None,
    nodes_per_unit=256,
    tol_update=1e-12,
    max_sweeps=300,
    refine_tol=1e-11,
    max_refines=3,
):
    """Unique saddle passage with prescribed entry/exit components.

    Picard sweeps on a uniform grid; the grid is doubled until the solution
    changes by less than ``refine_tol`` at common nodes.
    """
    s_in = np.asarray(s_in, dtype=float)
    u_out = np.asarray(u_out, dtype=float)
    if eta is None:
        lam1 = nf.spectrum.lambda1
        eta = min(lam1, nf.spectrum.lambda2 - lam1) / 10.0
    if delta is None:
        delta = max(np.max(np.abs(s_in)), np.max(np.abs(u_out)))

    n = int(math.ceil(nodes_per_unit * T)) + 1
    t, states, sweeps, update, updates, ratios = _picard(
        nf, s_in, u_out, T, n, tol_update, max_sweeps
    )
    levels = 1
    for _ in range(max_refines):
        n2 = 2 * (n - 1) + 1
        t2, states2, sweeps2, update2, updates2, ratios2 = _picard(
            nf, s_in, u_out, T, n2, tol_update, max_sweeps
        )
        diff = float(np.max(np.abs(states2[::2] - states)))
        t, states, sweeps, update, updates, ratios = (
            t2, states2, sweeps2, update2, updates2, ratios2
        )
        n = n2
        levels += 1
        if diff < refine_tol:
            break

    energies = nf.N(states)
    envelope = check_envelope(nf, t, states, s_in, u_out, T, eta, delta)
    return BvpSolution(
        T=T,
        s_in=s_in,
        u_out=u_out,
        t=t,
        states=states,
        energy=float(np.mean(energies)),
        energy_spread=float(np.max(np.abs(energies - energies.mean()))),
        iteration_count=sweeps,
        residual=update,
        updates=updates,
        update_ratios=ratios,
        envelope=envelope,
        grid_levels=levels,
    )


# ---------------------------------------------------------------------------
# tangency exponent
# ---------------------------------------------------------------------------


@dataclass
class TangencyReport:
    alpha_fit: float
    C_fit: float
    sample_Ts: list
    alpha_fit_stable: float | None = None
    skipped_stable: bool = False


def tangency_fit(nf, family, min_decades=2.0):
    """Power-law fit of the weak/strong entry components over a T-family.

    Regresses log|u2(0)| on log|u1(0)| (and the mirrored stable pair at
    t = T); the slope estimates the tangency exponent of the section trace.
    """
    u1 = np.array([abs(sol.states[0, 2]) for sol in family])
    u2 = np.array([abs(sol.states[0, 3]) for sol in family])
    if np.log10(u1.max() / u1.min()) < min_decades:
        raise InsufficientSpread(
            f"|u1(0)| spans {np.log10(u1.max() / max(u1.min(), 1e-300)):.2f} "
            f"decades; need {min_decades}"
        )
    coeff = np.polyfit(np.log(u1), np.log(u2), 1)
    alpha = float(coeff[0])
    C = float(np.exp(coeff[1]))

    s1 = np.array([abs(sol.states[-1, 0]) for sol in family])
    s2 = np.array([abs(sol.states[-1, 1]) for sol in family])
    skipped = bool(np.any(s2 < 1e-12))
    alpha_s = None
    if not skipped:
        alpha_s = float(np.polyfit(np.log(s1), np.log(s2), 1)[0])
    return TangencyReport(
        alpha_fit=alpha,
        C_fit=C,
        sample_Ts=[sol.T for sol in family],
        alpha_fit_stable=alpha_s,
        skipped_stable=skipped,
    )


# ---------------------------------------------------------------------------
# flow adapters: polynomial field or transported true flow
# ---------------------------------------------------------------------------


class NFFlow:
    """The truncated polynomial vector field in saddle coordinates."""

    def __init__(self, nf):
        self.nf = nf
        grad = [nf.N.diff(i) for i in range(4)]
        self._grad = grad

    def initial_state(self, w):
        return np.asarray(w, dtype=float)

    def saddle_of(self, y):
        return np.asarray(y, dtype=float)

    def rhs(self, t, y):
        return self.nf.field(y)

    def rhs_jacobian(self, y):
        return self.nf.field_jacobian(y)

    def energy_fn(self, w):
        return self.nf.N(w)

    def energy_grad(self, w):
        w = np.asarray(w, dtype=float)
        return np.array([g(w) for g in self._grad])


class TrueFlow:
    """The slow mechanical flow transported through the saddle chart."""

    def __init__(self, nf, slow):
        self.nf = nf
        self.slow = slow

    def initial_state(self, w):
        return self.nf.chart.inverse(np.asarray(w, dtype=float))

    def saddle_of(self, y):
        return self.nf.chart.forward(np.asarray(y, dtype=float))

    def rhs(self, t, y):
        return self.slow.rhs(t, y)

    def rhs_jacobian(self, y):
        return self.slow.rhs_jacobian(y)

    def energy_fn(self, w):
        return float(self.slow.energy(self.nf.chart.inverse(np.asarray(w))))

    def energy_grad(self, w):
        w = np.asarray(w, dtype=float)
        z = self.nf.chart.inverse(w)
        gz = np.concatenate([-self.slow.U.grad(z[:2]), self.slow.K_matrix @ z[2:]])
        J = self.nf.chart.inverse.jacobian(w)
        return J.T @ gz


def _as_flow(nf_or_flow):
    if isinstance(nf_or_flow, NormalFormChart):
        return NFFlow(nf_or_flow)
    return nf_or_flow


# ---------------------------------------------------------------------------
# local maps
# ---------------------------------------------------------------------------


def local_map(
    nf,
    sec_from,
    sec_to,
    x,
    r=None,
    t_cap=200.0,
    backward=False,
    rtol=1e-12,
    atol=1e-14,
    return_time=False,
):
    """First crossing of the target section, or EscapedDomain if the orbit
    leaves the validity ball first.

    ``nf`` may be a NormalFormChart (polynomial field) or a flow adapter.
    ``x`` is a 4D point in saddle coordinates on the source section.
    """
    flow = _as_flow(nf)
    if r is None:
        r = getattr(flow, "nf", nf).domain_radius_r or 1.0
    w0 = np.asarray(x, dtype=float)
    if not sec_from.contains(w0, tol=1e-7):
        raise ValueError(f"start point not on section {sec_from.kind}")
    y0 = flow.initial_state(w0)
    sign = -1.0 if backward else 1.0

    def ev_target(t, y):
        return flow.saddle_of(y)[sec_to.axis] - sec_to.value

    def ev_ball(t, y):
        w = flow.saddle_of(y)
        return float(w @ w) - r * r

    ev_target.terminal = True
    ev_ball.terminal = True
    ev_ball.direction = 1.0
    sol = solve_ivp(
        flow.rhs,
        (0.0, sign * t_cap),
        y0,
        method="DOP853",
        rtol=rtol,
        atol=atol,
        events=(ev_target, ev_ball),
        dense_output=False,
    )
    if len(sol.t_events[0]):
        t_hit = sol.t_events[0][0]
        if len(sol.t_events[1]) and abs(sol.t_events[1][0]) < abs(t_hit):
            raise EscapedDomain(
                f"orbit left B_r before reaching {sec_to.kind}"
            )
        w_hit = flow.saddle_of(sol.y_events[0][0])
        if return_time:
            return w_hit, float(t_hit)
        return w_hit
    if len(sol.t_events[1]):
        raise EscapedDomain(f"orbit left B_r before reaching {sec_to.kind}")
    raise MaxTimeExceeded(f"no crossing of {sec_to.kind} within {t_cap}")


# ---------------------------------------------------------------------------
# isolation rectangles
# ---------------------------------------------------------------------------


@dataclass
class SectionRectangle:
    """Curvilinear quadrilateral on a section-energy surface.

    Sides ``s12``/``s34`` are tangent to the restricted stable cone,
    ``u13``/``u24`` are preimages of restricted unstable curves (their
    images are cone-tangent).  The bilinear frame maps (a, b) in
    [-1,1]^2 to the (s2, u2) plane: a is the stable coordinate, b the
    unstable one.
    """

    surface: SectionSurface
    energy: float
    signature: str
    T_parameter: float
    vertices: np.ndarray        # (4, 4): x1, x2, x3, x4
    sides: dict                 # name -> (params, plane points (n,2))
    frame: BilinearFrame
    tangency_margins: dict

    def embed(self, ab):
        return self.surface.embed(self.frame.to_plane(ab))

    def ab_of_plane(self, p):
        return self.frame.to_ab(p)

    def contains_ab(self, ab, slack=0.0):
        return np.all(np.abs(np.asarray(ab)) <= 1.0 + slack)


def _sections_for_signature(signature, delta, r):
    sgn_s, sgn_u = signature[0], signature[1]
    sec_s = SectionSpec("s_plus" if sgn_s == "+" else "s_minus", delta, r)
    sec_u = SectionSpec("u_plus" if sgn_u == "+" else "u_minus", delta, r)
    return sec_s, sec_u


def cone_feasibility(surface, center_plane, c, radius, n_probe=8):
    """Largest dyadic a <= radius with nonempty restricted cones on the
    a-neighborhood of the center (both variants)."""
    a = radius
    while a > radius * 2.0 ** -12:
        ok = True
        for variant in ("stable", "unstable"):
            for k in range(n_probe):
                ang = 2 * math.pi * k / n_probe
                p = center_plane + a * np.array([math.cos(ang), math.sin(ang)])
                try:
                    w = surface.embed(p)
                    if not surface.restricted_cone_nonempty(w, c, variant):
                        ok = False
                        break
                except EmptyRestrictedCone:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return a
        a *= 0.5
    raise EmptyRestrictedCone("restricted cones empty near the center point")


def find_feasible_T0(nf, signature, c=1.0, delta=None, T_grid=None, **bvp_kw):
    """Smallest dyadic T at which the rectangle construction is feasible."""
    if T_grid is None:
        T_grid = [1.0 * 2**j for j in range(0, 6)]
    for T in T_grid:
        try:
            build_rectangle(nf, signature, T, c=c, delta=delta, **bvp_kw)
            return T
        except (EmptyRestrictedCone, EscapedDomain, MaxTimeExceeded):
            continue
    raise EmptyRestrictedCone("no feasible T in the scanned dyadic grid")


def _polyline_crossing(pts_a, pts_b):
    """First intersection of two polylines in the plane, or None."""
    for i in range(len(pts_a) - 1):
        p, r = pts_a[i], pts_a[i + 1] - pts_a[i]
        for j in range(len(pts_b) - 1):
            q, s = pts_b[j], pts_b[j + 1] - pts_b[j]
            denom = r[0] * s[1] - r[1] * s[0]
            if abs(denom) < 1e-18:
                continue
            d = q - p
            tt = (d[0] * s[1] - d[1] * s[0]) / denom
            uu = (d[0] * r[1] - d[1] * r[0]) / denom
            if -1e-12 <= tt <= 1 + 1e-12 and -1e-12 <= uu <= 1 + 1e-12:
                return p + tt * r, i, tt
    return None


def build_rectangle(
    nf,
    signature,
    T,
    s_in=None,
    u_out=None,
    delta=None,
    c=1.0,
    arc_stable=None,
    arc_unstable=None,
    n_side=17,
    flow=None,
    eta=None,
):
    """Isolation rectangle R(T) around the saddle passage and its image.

    Returns (rectangle, image_rectangle).  The stable sides pass through
    the entry point x_T of the passage with boundary data (s_in, u_out);
    the transversal sides are preimages of restricted unstable curves
    through the image points.
    """
    if signature not in ("++", "+-", "-+", "--"):
        raise ValueError("signature must be one of ++, +-, -+, --")
    r = nf.domain_radius_r or 1.0
    if delta is None:
        delta = 0.4 * r
    sec_s, sec_u = _sections_for_signature(signature, delta, r)
    if s_in is None:
        s_in = np.array([sec_s.value, 0.0])
    if u_out is None:
        u_out = np.array([sec_u.value, 0.0])
    s_in = np.asarray(s_in, dtype=float)
    u_out = np.asarray(u_out, dtype=float)

    sol = solve_saddle_bvp(nf, s_in, u_out, T, eta=eta, delta=delta)
    x_T = sol.entry_point
    y_T = sol.exit_point

    flw = _as_flow(nf) if flow is None else flow
    energy = flw.energy_fn(x_T)
    surf_s = SectionSurface(sec_s, energy, flw.energy_fn, flw.energy_grad,
                            (nf.spectrum.lambda1, nf.spectrum.lambda2))
    surf_u = SectionSurface(sec_u, energy, flw.energy_fn, flw.energy_grad,
                            (nf.spectrum.lambda1, nf.spectrum.lambda2))

    x_plane = surf_s.project(x_T)
    y_plane = surf_u.project(y_T)

    a_s = cone_feasibility(surf_s, x_plane, c, radius=delta / 2)
    a_u = cone_feasibility(surf_u, y_plane, c, radius=delta / 2)
    if arc_stable is None:
        arc_stable = a_s / 2.0
    if arc_unstable is None:
        arc_unstable = a_u / 2.0

    # stable mid-curve through x_T, endpoints A, B
    _, mid_pts = integrate_cone_curve(
        surf_s, x_plane, arc_stable, "stable", n_steps=max(n_side - 1, 8),
        r_limit=r, c_check=c,
    )
    A_plane, B_plane = mid_pts[0], mid_pts[-1]

    # forward images of A and B on the exit section
    A_img = local_map(flw, sec_s, sec_u, surf_s.embed(A_plane), r=r)
    B_img = local_map(flw, sec_s, sec_u, surf_s.embed(B_plane), r=r)

    # restricted unstable curves through the images (image sides u13', u24')
    pu_A, img_side_A = integrate_cone_curve(
        surf_u, surf_u.project(A_img), arc_unstable, "unstable",
        n_steps=max(n_side - 1, 8), r_limit=r, c_check=c,
    )
    pu_B, img_side_B = integrate_cone_curve(
        surf_u, surf_u.project(B_img), arc_unstable, "unstable",
        n_steps=max(n_side - 1, 8), r_limit=r, c_check=c,
    )

    # transversal sides of R: preimages of the unstable curves
    def pull_back(img_pts):
        out = []
        for p in img_pts:
            w = surf_u.embed(p)
            w_back = local_map(flw, sec_u, sec_s, w, r=r, backward=True)
            out.append(surf_s.project(w_back))
        return np.array(out)

    side_A = pull_back(img_side_A)  # u13 through A
    side_B = pull_back(img_side_B)  # u24 through B

    # stable sides: cone curves from the ends of side_A, trimmed at side_B
    def stable_side(start_plane):
        _, pts = integrate_cone_curve(
            surf_s, start_plane, 4.0 * arc_stable, "stable",
            n_steps=4 * max(n_side - 1, 8), r_limit=r, c_check=c,
        )
        hit = _polyline_crossing(pts, side_B)
        if hit is None:
            raise EmptyRestrictedCone(
                "stable side failed to reach the opposite transversal side"
            )
        cross, i, tt = hit
        mid = len(pts) // 2
        if i >= mid:
            chain = np.vstack([pts[mid : i + 1], cross])
        else:
            chain = np.vstack([pts[mid : i - 1 if i >= 1 else None : -1], cross])
        return chain

    side_12 = stable_side(side_A[0])   # from x1 = side_A[0] to x2 on side_B
    side_34 = stable_side(side_A[-1])  # from x3 = side_A[-1] to x4

    x1, x2 = side_12[0], side_12[-1]
    x3, x4 = side_34[0], side_34[-1]
    frame = BilinearFrame(np.array([x1, x2, x4, x3]))

    def tangency_margin(surface, pts, variant):
        worst = math.inf
        for i in range(len(pts) - 1):
            p_mid = 0.5 * (pts[i] + pts[i + 1])
            w = surface.embed(p_mid)
            t1, t2 = surface.tangent_basis(w)
            d = pts[i + 1] - pts[i]
            v = d[0] * t1 + d[1] * t2
            worst = min(worst, c - cone_ratio(v, variant))
        return worst

    margins = {
        "s12": tangency_margin(surf_s, side_12, "stable"),
        "s34": tangency_margin(surf_s, side_34, "stable"),
        "u13_image": tangency_margin(surf_u, img_side_A, "unstable"),
        "u24_image": tangency_margin(surf_u, img_side_B, "unstable"),
    }

    verts = np.array(
        [surf_s.embed(x1), surf_s.embed(x2), surf_s.embed(x3), surf_s.embed(x4)]
    )
    rect = SectionRectangle(
        surface=surf_s,
        energy=energy,
        signature=signature,
        T_parameter=T,
        vertices=verts,
        sides={
            "s12": (np.linspace(-1, 1, len(side_12)), side_12),
            "s34": (np.linspace(-1, 1, len(side_34)), side_34),
            "u13": (np.linspace(-1, 1, len(side_A)), side_A),
            "u24": (np.linspace(-1, 1, len(side_B)), side_B),
        },
        frame=frame,
        tangency_margins=margins,
    )

    # image rectangle: map the corners and the stable sides forward,
    # keep the constructed unstable curves as the transversal image sides
    def push(pts):
        out = []
        for p in pts:
            w = surf_s.embed(p)
            out.append(surf_u.project(local_map(flw, sec_s, sec_u, w, r=r)))
        return np.array(out)

    img_12 = push(side_12)
    img_34 = push(side_34)
    img_frame = BilinearFrame(
        np.array([img_12[0], img_12[-1], img_34[-1], img_34[0]])
    )
    rect_img = SectionRectangle(
        surface=surf_u,
        energy=energy,
        signature=signature,
        T_parameter=T,
        vertices=np.array(
            [surf_u.embed(img_12[0]), surf_u.embed(img_12[-1]),
             surf_u.embed(img_34[0]), surf_u.embed(img_34[-1])]
        ),
        sides={
            "s12": (np.linspace(-1, 1, len(img_12)), img_12),
            "s34": (np.linspace(-1, 1, len(img_34)), img_34),
            "u13": (pu_A, img_side_A),
            "u24": (pu_B, img_side_B),
        },
        frame=img_frame,
        tangency_margins=margins,
    )
    return rect, rect_img, sol
