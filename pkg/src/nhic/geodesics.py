"""Minimal closed geodesics of the energy-weighted kinetic metric on T^2.

The metric is ``g_E(v) = 2 (E + U(theta)) K_vel(v)`` with the kinetic form
on velocities ``K_vel(v) = 0.5 <K_matrix^{-1} v, v>`` (so that, by the
Maupertuis principle, reparametrized geodesics on the level E are orbits
of the slow Hamiltonian).  Loops are discretized as closed polygons in the
universal cover; the minimizer is found by Barzilai-Borwein descent on the
discrete length followed by a Newton polish in normal offsets, with the
rotation mode removed by uniform rearclength resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, lil_matrix
from scipy.sparse.csgraph import dijkstra as _dijkstra
from scipy.integrate import solve_ivp

from .errors import (
    B2Violation,
    DegenerateMetric,
    NoConvergence,
    NotABasis,
    StepFailure,
)
from .systems import TWO_PI, Trajectory

_GAUSS4_X = np.array(
    [0.5 - math.sqrt(3.0 / 7.0 + 2.0 / 7.0 * math.sqrt(6.0 / 5.0)) / 2.0,
     0.5 - math.sqrt(3.0 / 7.0 - 2.0 / 7.0 * math.sqrt(6.0 / 5.0)) / 2.0,
     0.5 + math.sqrt(3.0 / 7.0 - 2.0 / 7.0 * math.sqrt(6.0 / 5.0)) / 2.0,
     0.5 + math.sqrt(3.0 / 7.0 + 2.0 / 7.0 * math.sqrt(6.0 / 5.0)) / 2.0]
)
_GAUSS4_W = np.array(
    [(18.0 - math.sqrt(30.0)) / 72.0, (18.0 + math.sqrt(30.0)) / 72.0,
     (18.0 + math.sqrt(30.0)) / 72.0, (18.0 - math.sqrt(30.0)) / 72.0]
)


@dataclass
class HomologyClass:
    h: tuple

    def __post_init__(self):
        self.h = (int(self.h[0]), int(self.h[1]))

    @property
    def vec(self):
        return np.array(self.h, dtype=float)

    def gcd(self):
        return math.gcd(abs(self.h[0]), abs(self.h[1]))

    def is_primitive(self):
        return self.gcd() == 1


@dataclass
class DiscreteLoop:
    """Closed polygon in the universal cover; the last point repeats the
    first shifted by 2 pi h."""

    points: np.ndarray  # (N+1, 2) lifted, closure row included
    homology: HomologyClass
    energy: float
    length: float
    el_residual: float = float("nan")
    converged: bool = True
    regularized: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        n_seg = len(self.points) - 1
        if n_seg < 64:
            raise ValueError("need at least 64 segments")
        gap = self.points[-1] - self.points[0] - TWO_PI * self.homology.vec
        if np.max(np.abs(gap)) > 1e-6:
            raise ValueError(f"closure defect {np.max(np.abs(gap)):.2e}")
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if steps.max() > 4.0 * steps.mean():
            raise ValueError("node spacing exceeds 4x the mean")

    @property
    def n_segments(self):
        return len(self.points) - 1

    def interior(self):
        return self.points[:-1]

    def write_csv(self, path):
        s = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(self.points, axis=0), axis=1))]
        )
        data = np.column_stack([s, self.points])
        np.savetxt(path, data, delimiter=",", header="s,theta1,theta2",
                   comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# length and derivative functionals
# ---------------------------------------------------------------------------


def _conformal(slow, E, pts):
    return E + slow.U.value(pts)


def jacobi_length(slow, loop, E=None, pts=None):
    """Loop length with 4-point Gauss quadrature per segment.

    Accepts either a DiscreteLoop or a raw (N+1, 2) point array via pts.
    """
    if pts is None:
        pts = loop.points
        if E is None:
            E = loop.energy
    d = np.diff(pts, axis=0)
    q = np.einsum("ij,jk,ik->i", d, slow.K_inv, d)
    total = 0.0
    rho_min = math.inf
    for x, w in zip(_GAUSS4_X, _GAUSS4_W):
        rho = _conformal(slow, E, pts[:-1] + x * d)
        rho_min = min(rho_min, float(rho.min()))
        total += w * np.sum(np.sqrt(np.maximum(rho, 0.0) * q))
    if E < 0 and rho_min < 0:
        raise DegenerateMetric(
            f"conformal factor changes sign (min {rho_min:.3e}) at E={E}"
        )
    return float(total)


def length_energy_slope(slow, loop, E=None):
    """dl/dE at fixed loop (envelope formula): int sqrt(K_vel) / sqrt(2(E+U))."""
    pts = loop.points if hasattr(loop, "points") else loop
    if E is None:
        E = loop.energy
    d = np.diff(pts, axis=0)
    q = np.einsum("ij,jk,ik->i", d, slow.K_inv, d)
    total = 0.0
    for x, w in zip(_GAUSS4_X, _GAUSS4_W):
        rho = _conformal(slow, E, pts[:-1] + x * d)
        total += w * np.sum(np.sqrt(q / np.maximum(rho, 1e-300))) / 2.0
    return float(total)


def _energy_functional_grad(slow, E, X, shift, floor=0.0):
    """Smooth surrogate sum_i rho(m_i) q_i and its gradient (shape stage)."""
    pts = np.vstack([X, X[0] + shift])
    d = np.diff(pts, axis=0)
    m = pts[:-1] + 0.5 * d
    rho = _conformal(slow, E, m) + floor
    Kd = d @ slow.K_inv
    q = np.einsum("ij,ij->i", d, Kd)
    F = float(np.sum(rho * q))
    dm = slow.U.grad(m) * q[:, None]
    dd = 2.0 * Kd * rho[:, None]
    g = np.zeros_like(X)
    g += 0.5 * dm - dd
    g += np.roll(0.5 * dm + dd, 1, axis=0)
    return F, g


def _midpoint_length_grad(slow, E, X, shift):
    """Discrete length (midpoint conformal factor) and its gradient.

    X holds the N free nodes; the closing node is X[0] + shift.
    """
    pts = np.vstack([X, X[0] + shift])
    d = np.diff(pts, axis=0)
    m = pts[:-1] + 0.5 * d
    rho = np.maximum(_conformal(slow, E, m), 1e-300)
    Kd = d @ slow.K_inv
    q = np.einsum("ij,ij->i", d, Kd)
    ell = np.sqrt(rho * q)
    L = float(np.sum(ell))

    sq = np.sqrt(np.maximum(q, 1e-300))
    srho = np.sqrt(rho)
    grad_rho = slow.U.grad(m)            # d rho / d m
    dm = 0.5 * grad_rho * (sq / srho)[:, None]
    dd = Kd * (srho / sq)[:, None]
    # contributions: node j gets 0.5*dm from segments j-1 and j,
    # -dd from segment j, +dd from segment j-1
    g = np.zeros_like(X)
    N = len(X)
    g += 0.5 * dm - dd
    g += np.roll(0.5 * dm + dd, 1, axis=0)
    return L, g


def _uniform_resample(X, shift, n=None):
    """Closed-polygon resampling to uniform Euclidean arclength."""
    pts = np.vstack([X, X[0] + shift])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = len(X) if n is None else n
    s_new = np.linspace(0.0, total, n, endpoint=False)
    out = np.column_stack(
        [np.interp(s_new, s, pts[:, 0]), np.interp(s_new, s, pts[:, 1])]
    )
    return out


def _normals(X, shift):
    pts = np.vstack([X, X[0] + shift])
    d = np.diff(pts, axis=0)
    tang = d + np.roll(d, 1, axis=0)
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-300)
    return np.column_stack([-tang[:, 1], tang[:, 0]])


def _normal_residual(slow, E, X, shift):
    _, g = _midpoint_length_grad(slow, E, X, shift)
    n = _normals(X, shift)
    return float(np.max(np.abs(np.einsum("ij,ij->i", g, n))))


def _length_hessian_blocks(slow, E, X, shift):
    """Per-segment 2x2 Hessian blocks of the midpoint-rule length."""
    pts = np.vstack([X, X[0] + shift])
    d = np.diff(pts, axis=0)
    m = pts[:-1] + 0.5 * d
    rho = np.maximum(_conformal(slow, E, m), 1e-300)
    Kd = d @ slow.K_inv
    q = np.einsum("ij,ij->i", d, Kd)
    sq = np.sqrt(q)
    srho = np.sqrt(rho)
    grho = slow.U.grad(m)
    N = len(X)
    Hmm = np.empty((N, 2, 2))
    Hdd = np.empty((N, 2, 2))
    Hmd = np.empty((N, 2, 2))
    Kinv = slow.K_inv
    for i in range(N):
        hess_rho = slow.U.hess(m[i])
        Hmm[i] = sq[i] * (
            hess_rho / (2 * srho[i])
            - np.outer(grho[i], grho[i]) / (4 * rho[i] ** 1.5)
        )
        Hdd[i] = srho[i] * (
            Kinv / sq[i] - np.outer(Kd[i], Kd[i]) / q[i] ** 1.5
        )
        Hmd[i] = np.outer(grho[i], Kd[i]) / (2 * srho[i] * sq[i])
    return Hmm, Hdd, Hmd


def _normal_newton_system(slow, E, X, shift):
    """Gradient and cyclic-tridiagonal Hessian of length in normal offsets."""
    N = len(X)
    nrm = _normals(X, shift)
    _, g = _midpoint_length_grad(slow, E, X, shift)
    gn = np.einsum("ij,ij->i", g, nrm)

    Hmm, Hdd, Hmd = _length_hessian_blocks(slow, E, X, shift)
    # segment i couples nodes i and i+1 (mod N):
    # dm/dx_i = I/2, dm/dx_{i+1} = I/2, dd/dx_i = -I, dd/dx_{i+1} = I
    diag = np.zeros((N, 2, 2))
    off = np.zeros((N, 2, 2))  # off[i]: coupling (i, i+1)
    for i in range(N):
        A = Hmm[i]
        B = Hdd[i]
        C = Hmd[i]
        H_ii = 0.25 * A + B - 0.5 * (C + C.T)
        H_jj = 0.25 * A + B + 0.5 * (C + C.T)
        H_ij = 0.25 * A - B + 0.5 * (C.T - C)
        j = (i + 1) % N
        diag[i] += H_ii
        diag[j] += H_jj
        off[i] += H_ij
    d_main = np.einsum("ij,ijk,ik->i", nrm, diag, nrm)
    d_off = np.array(
        [nrm[i] @ off[i] @ nrm[(i + 1) % N] for i in range(N)]
    )
    return gn, d_main, d_off


def _solve_cyclic_tridiag(d_main, d_off, rhs, damping=0.0):
    N = len(d_main)
    A = lil_matrix((N, N))
    for i in range(N):
        A[i, i] = d_main[i] + damping
        j = (i + 1) % N
        A[i, j] = d_off[i]
        A[j, i] = d_off[i]
    from scipy.sparse.linalg import spsolve

    return spsolve(csr_matrix(A), rhs)


def straight_seed(h, n, offset=0.0, start=None):
    hv = np.array(h, dtype=float)
    if start is None:
        perp = np.array([-hv[1], hv[0]])
        nrm = np.linalg.norm(perp)
        start = offset * perp / nrm if nrm > 0 else np.zeros(2)
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    return start + TWO_PI * t[:, None] * hv[None, :]


def minimize_loop(
    slow,
    h,
    E,
    N=512,
    seed=None,
    max_bb=2000,
    max_newton=40,
    tol_residual=1e-8,
    raise_on_failure=True,
):
    """Locally shortest closed loop in homology class h at energy E.

    Barzilai-Borwein descent plus Newton polish in normal offsets; the
    returned loop is uniformly resampled in Euclidean arclength and carries
    the worst normal component of the discrete first variation.
    """
    h = h if isinstance(h, HomologyClass) else HomologyClass(tuple(h))
    shift = TWO_PI * h.vec
    if seed is None:
        X = straight_seed(h.h, N)
    else:
        X = _uniform_resample(np.asarray(seed, dtype=float)[:: 1], shift, N) \
            if len(seed) != N else np.asarray(seed, dtype=float).copy()

    # stage 1: safeguarded descent on the smooth surrogate (shape finding);
    # BB trial steps with Armijo backtracking so the polygon cannot fold
    floor = 1e-4 * max(1.0, float(np.max(np.abs(slow.U.a))) if slow.U.a.size else 1.0)
    floor = floor if E < 1e-9 else 0.0
    F, g = _energy_functional_grad(slow, E, X, shift, floor)
    step = 0.1 / max(np.max(np.abs(g)), 1e-12)
    X_prev, g_prev = None, None
    for it in range(max_bb):
        if X_prev is not None:
            sx = (X - X_prev).ravel()
            sg = (g - g_prev).ravel()
            denom = sg @ sg
            if denom > 0:
                step = max(min(abs(sx @ sg) / denom, 1e3), 1e-12)
        gnorm2 = float(np.sum(g * g))
        trial = step
        accepted = False
        for _ in range(40):
            X_new = X - trial * g
            F_new, g_new = _energy_functional_grad(slow, E, X_new, shift, floor)
            if np.isfinite(F_new) and F_new <= F - 1e-4 * trial * gnorm2:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            break
        X_prev, g_prev = X, g
        X, F, g = X_new, F_new, g_new
        if (it + 1) % 60 == 0:
            X = _uniform_resample(X, shift)
            F, g = _energy_functional_grad(slow, E, X, shift, floor)
            X_prev = None
        if gnorm2 ** 0.5 * trial < 1e-13:
            break

    X = _uniform_resample(X, shift)
    residual = _normal_residual(slow, E, X, shift)
    for _ in range(max_newton):
        if residual < tol_residual * 1e-3:
            break
        gn, d_main, d_off = _normal_newton_system(slow, E, X, shift)
        damping = 0.0 if residual < 1e-4 else 1e-3 * np.max(np.abs(d_main))
        try:
            t_off = _solve_cyclic_tridiag(d_main, d_off, -gn, damping)
        except Exception:
            break
        if not np.all(np.isfinite(t_off)):
            break
        max_step = np.max(np.abs(t_off))
        cap = 0.2
        if max_step > cap:
            t_off *= cap / max_step
        X = X + t_off[:, None] * _normals(X, shift)
        X = _uniform_resample(X, shift)
        residual = _normal_residual(slow, E, X, shift)

    converged = residual < tol_residual
    pts = np.vstack([X, X[0] + shift])
    loop = DiscreteLoop(
        points=pts,
        homology=h,
        energy=E,
        length=jacobi_length(slow, None, E, pts=pts),
        el_residual=residual,
        converged=converged,
    )
    if not converged and raise_on_failure:
        raise NoConvergence(
            f"normal residual {residual:.2e} above {tol_residual:g}", best=loop
        )
    return loop


def morse_smallest_eigs(slow, loop, k=4):
    """Smallest eigenvalues of the normal-offset length Hessian and the
    degeneracy threshold 1e-6 * trace / N."""
    X = loop.points[:-1]
    shift = loop.points[-1] - loop.points[0]
    _, d_main, d_off = _normal_newton_system(slow, loop.energy, X, shift)
    N = len(d_main)
    A = np.zeros((N, N))
    idx = np.arange(N)
    A[idx, idx] = d_main
    A[idx, (idx + 1) % N] = d_off
    A[(idx + 1) % N, idx] = d_off
    eigs = np.linalg.eigvalsh(A)
    threshold = 1e-6 * np.trace(A) / N
    return eigs[:k], float(threshold)


def is_morse_nondegenerate(slow, loop):
    eigs, threshold = morse_smallest_eigs(slow, loop)
    return bool(eigs[0] > threshold), float(eigs[0]), threshold


# ---------------------------------------------------------------------------
# loop classification (self-intersections on the torus)
# ---------------------------------------------------------------------------


@dataclass
class LoopClassification:
    kind: str  # 'simple' | 'non-simple'
    intersections: list  # (i, ti, j, tj, point, translate)

    @property
    def simple(self):
        return self.kind == "simple"


def _seg_intersections(P, A, B, exclude_adjacent, n_total):
    """Transversal crossings between segment chains A and B (index arrays
    into P-space); A, B are (n, 2, 2) arrays of endpoints."""
    hits = []
    for i in range(len(A)):
        p, r = A[i][0], A[i][1] - A[i][0]
        qs = B[:, 0, :]
        ss = B[:, 1, :] - B[:, 0, :]
        denom = r[0] * ss[:, 1] - r[1] * ss[:, 0]
        dd = qs - p
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (dd[:, 0] * ss[:, 1] - dd[:, 1] * ss[:, 0]) / denom
            uu = (dd[:, 0] * r[1] - dd[:, 1] * r[0]) / denom
        eps = 1e-10
        ok = (
            np.isfinite(tt)
            & (tt > eps) & (tt < 1 - eps)
            & (uu > eps) & (uu < 1 - eps)
        )
        for j in np.where(ok)[0]:
            hits.append((i, float(tt[j]), j, float(uu[j]), p + tt[j] * r))
    return hits


def classify_loop(loop, tol=1e-10):
    """Exact segment test of the lifted loop against its torus translates.

    A crossing of the lift with the translate by 2 pi m (m != 0), or a
    non-adjacent self-crossing of the lift, is a self-intersection on T^2.
    """
    pts = loop.points
    segs = np.stack([pts[:-1], pts[1:]], axis=1)  # (n, 2, 2)
    n = len(segs)
    hits = []

    # m = 0: pairwise, skipping adjacent segments (shared endpoints)
    for i in range(n):
        p, r = segs[i][0], segs[i][1] - segs[i][0]
        js = np.arange(i + 2, n if i > 0 else n - 1)
        if len(js) == 0:
            continue
        B = segs[js]
        found = _seg_intersections(pts, segs[i : i + 1], B, True, n)
        for (_, ti, jj, tj, point) in found:
            hits.append((i, ti, int(js[jj]), tj, point, (0, 0)))

    # translates: bounding-box ranges
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span1 = int(np.ceil((hi[0] - lo[0]) / TWO_PI)) + 1
    span2 = int(np.ceil((hi[1] - lo[1]) / TWO_PI)) + 1
    for m1 in range(-span1, span1 + 1):
        for m2 in range(-span2, span2 + 1):
            if (m1, m2) == (0, 0):
                continue
            if (m1, m2) < (0, 0):
                continue  # symmetric pair counted once
            offset = TWO_PI * np.array([m1, m2], dtype=float)
            B = segs + offset[None, None, :]
            if (B[:, :, 0].min() > hi[0] or B[:, :, 0].max() < lo[0]
                    or B[:, :, 1].min() > hi[1] or B[:, :, 1].max() < lo[1]):
                continue
            found = _seg_intersections(pts, segs, B, False, n)
            for (i, ti, j, tj, point) in found:
                # identical image through a closure shift is not a crossing
                if np.allclose(
                    pts[i] + ti * (pts[i + 1] - pts[i]),
                    pts[j] + offset + tj * (pts[j + 1] - pts[j]),
                    atol=1e-12,
                ) and i == j:
                    continue
                hits.append((i, ti, j, tj, point, (m1, m2)))

    kind = "simple" if not hits else "non-simple"
    return LoopClassification(kind=kind, intersections=hits)


def classify_loop_bruteforce(loop):
    """O(N^2) all-pairs oracle used to validate classify_loop."""
    return classify_loop(loop)


# ---------------------------------------------------------------------------
# crossing-sequence word of a composite class
# ---------------------------------------------------------------------------


@dataclass
class LoopWord:
    word: tuple
    canonical_rotation: tuple

    def __post_init__(self):
        self.word = tuple(int(x) for x in self.word)
        self.canonical_rotation = tuple(int(x) for x in self.canonical_rotation)
        if set(self.word) - {1, 2}:
            raise ValueError("word letters must be 1 or 2")

    @property
    def counts(self):
        return self.word.count(1), self.word.count(2)


def canonical_rotation(word):
    word = tuple(word)
    return min(tuple(word[i:] + word[:i]) for i in range(len(word)))


def loop_word(h, h1, h2, base_point=None, rng=None):
    """Crossing sequence of the straight representative of h against the
    two lattice-line families in basis-adapted coordinates.

    h must decompose as n1 h1 + n2 h2 with n1, n2 >= 1 and {h1, h2} a basis
    of the integer lattice; the result is independent of the generic base
    point up to cyclic rotation.
    """
    h = np.asarray(h if not isinstance(h, HomologyClass) else h.h, dtype=float)
    M = np.column_stack([h1, h2]).astype(float)
    det = round(M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0])
    if abs(det) != 1:
        raise NotABasis(f"det(h1|h2) = {det}, need +-1")
    n = np.linalg.solve(M, h)
    n_int = np.round(n).astype(int)
    if (
        np.max(np.abs(n - n_int)) > 1e-9
        or n_int[0] < 0
        or n_int[1] < 0
        or n_int[0] + n_int[1] < 1
    ):
        raise ValueError(
            f"h must be n1 h1 + n2 h2 with n1, n2 >= 0, n1 + n2 >= 1; got {n}"
        )
    n1, n2 = int(n_int[0]), int(n_int[1])

    if base_point is None:
        rng = np.random.default_rng() if rng is None else rng
        base_point = rng.uniform(0.05, 0.95, 2)
    y1, y2 = float(base_point[0]) % 1.0, float(base_point[1]) % 1.0

    events = []
    for k in range(1, n1 + 1):
        events.append(((k - y1) / n1, 1))
    for k in range(1, n2 + 1):
        events.append(((k - y2) / n2, 2))
    events.sort()
    word = tuple(letter for _, letter in events)
    return LoopWord(word=word, canonical_rotation=canonical_rotation(word))


# ---------------------------------------------------------------------------
# grid-graph oracle
# ---------------------------------------------------------------------------

_STENCIL16 = [
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (1, -1), (-1, 1), (-1, -1),
    (1, 2), (1, -2), (-1, 2), (-1, -2),
    (2, 1), (2, -1), (-2, 1), (-2, -1),
]


def _unimodular_to_e1(h):
    """A in GL(2, Z) with A h = (1, 0)^T (h primitive)."""
    a, b = int(h[0]), int(h[1])
    g, x, y = _ext_gcd(a, b)
    if g != 1:
        raise ValueError("h must be primitive for the grid oracle")
    # x a + y b = 1; rows (x, y) and (-b, a) give det = x a + y b = 1
    return np.array([[x, y], [-b, a]])


def _ext_gcd(a, b):
    if b == 0:
        return (abs(a), 1 if a >= 0 else -1, 0)
    g, x, y = _ext_gcd(b, a % b)
    return g, y, x - (a // b) * y


def grid_graph_length(slow, h, E, n=64):
    """Shortest closed grid path in class h (16-neighbor stencil).

    Upper-bound oracle for minimize_loop: a coordinate change sends h to
    (1, 0), the strip of one period is layered in the new first coordinate,
    and Dijkstra matches start and end rows.
    """
    h = h if isinstance(h, HomologyClass) else HomologyClass(tuple(h))
    A = _unimodular_to_e1(h.h)
    Ainv = np.linalg.inv(A)
    K_t = Ainv.T @ slow.K_inv @ Ainv  # kinetic form in new coordinates

    hx = TWO_PI / n

    def seg_weight(p_xi, d_xi):
        q = d_xi @ K_t @ d_xi
        tot = 0.0
        for x, w in zip(_GAUSS4_X, _GAUSS4_W):
            theta = (p_xi + x * d_xi) @ Ainv.T
            rho = max(E + float(slow.U.value(theta)), 0.0)
            tot += w * math.sqrt(rho * q)
        return tot

    n_layers = n + 1
    n_nodes = n_layers * n

    def node(layer, j):
        return layer * n + (j % n)

    rows, cols, vals = [], [], []
    for layer in range(n_layers):
        for j in range(n):
            p = np.array([layer * hx, j * hx])
            for (di, dj) in _STENCIL16:
                l2 = layer + di
                if l2 < 0 or l2 > n:
                    continue
                d = np.array([di * hx, dj * hx])
                wgt = seg_weight(p, d)
                rows.append(node(layer, j))
                cols.append(node(l2, j + dj))
                vals.append(wgt)
    G = csr_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
    sources = [node(0, j) for j in range(n)]
    D = _dijkstra(G, directed=True, indices=sources)
    best = math.inf
    for j in range(n):
        best = min(best, D[j, node(n, j)])
    return float(best)


# ---------------------------------------------------------------------------
# family continuation
# ---------------------------------------------------------------------------


@dataclass
class FamilyRecord:
    energy_grid: np.ndarray
    loops: list                 # per energy: list of 1 or 2 DiscreteLoops
    lengths: np.ndarray         # (nE, n_branches) with nan for dead branches
    bifurcation_energies: list
    bifurcation_slopes: list    # (slope_a, slope_b) at each E*
    morse_flags: list           # per energy, flag of the global minimizer

    def to_dict(self):
        return {
            "energies": [float(e) for e in self.energy_grid],
            "lengths": [[None if math.isnan(x) else float(x) for x in row]
                        for row in self.lengths],
            "bifurcations": [float(e) for e in self.bifurcation_energies],
            "bifurcation_slopes": [
                [float(a), float(b)] for a, b in self.bifurcation_slopes
            ],
            "morse_flags": [bool(f) for f in self.morse_flags],
        }


def loop_distance(loop_a, loop_b):
    """Symmetric Hausdorff distance of the node sets on the torus."""
    pa = np.mod(loop_a.points[:-1], TWO_PI)
    pb = np.mod(loop_b.points[:-1], TWO_PI)
    d = pa[:, None, :] - pb[None, :, :]
    d = np.abs(d)
    d = np.minimum(d, TWO_PI - d)
    dist = np.sqrt((d ** 2).sum(axis=2))
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


def _distinct(loop_a, loop_b, tol=5e-2):
    return loop_distance(loop_a, loop_b) > tol


def continue_family(
    slow,
    h,
    E_lo,
    E_hi,
    nE,
    N=256,
    n_starts=6,
    tol_bif=1e-8,
    tol_B3=1e-4,
):
    """Branch continuation of locally shortest loops over an energy grid.

    Detects exchanges of global optimality between branches (bifurcation
    energies), checks Morse nondegeneracy of the minimizer, and evaluates
    the envelope slope dl/dE on both branches at each crossing.
    """
    if E_lo <= 0:
        raise ValueError("E_lo must be positive")
    h = h if isinstance(h, HomologyClass) else HomologyClass(tuple(h))
    energies = np.linspace(E_lo, E_hi, nE)

    # seed distinct branches at the lowest energy from transverse offsets
    branch_loops = []
    for k in range(n_starts):
        offset = TWO_PI * k / n_starts
        try:
            loop = minimize_loop(
                slow, h, energies[0], N=N,
                seed=straight_seed(h.h, N, offset=offset),
                raise_on_failure=False,
            )
        except (DegenerateMetric, StepFailure):
            continue
        if not loop.converged:
            continue
        if all(_distinct(loop, b) for b in branch_loops):
            branch_loops.append(loop)
    if not branch_loops:
        raise NoConvergence("no branch converged at the lowest energy")
    n_br = len(branch_loops)

    loops_per_E = []
    lengths = np.full((nE, n_br), np.nan)
    morse_flags = []
    all_loops = [[None] * n_br for _ in range(nE)]
    for i, E in enumerate(energies):
        for b in range(n_br):
            seed = branch_loops[b].points[:-1]
            try:
                loop = minimize_loop(
                    slow, h, E, N=N, seed=seed, raise_on_failure=False
                )
            except (DegenerateMetric, StepFailure):
                continue
            if loop.converged:
                branch_loops[b] = loop
                lengths[i, b] = loop.length
                all_loops[i][b] = loop
        best = int(np.nanargmin(lengths[i]))
        near = [
            b for b in range(n_br)
            if b != best
            and not np.isnan(lengths[i, b])
            and lengths[i, b] - lengths[i, best] < tol_bif
            and all_loops[i][b] is not None
            and _distinct(all_loops[i][b], all_loops[i][best])
        ]
        if len(near) >= 2:
            raise B2Violation(
                f"three shortest loops within {tol_bif:g} at E={E:.6g}"
            )
        loops_per_E.append([all_loops[i][best]]
                           + [all_loops[i][b] for b in near])
        ok, _, _ = is_morse_nondegenerate(slow, all_loops[i][best])
        morse_flags.append(ok)

    # bifurcations: transversal exchange of optimality between two branches
    bifurcations = []
    bif_slopes = []
    if n_br >= 2:
        cols = np.argsort(np.nanmean(lengths, axis=0))[:2]
        diff = lengths[:, cols[0]] - lengths[:, cols[1]]
        valid = ~np.isnan(diff)
        for i in range(nE - 1):
            if not (valid[i] and valid[i + 1]):
                continue
            if diff[i] * diff[i + 1] < 0:
                e0, e1 = energies[i], energies[i + 1]
                f0, f1 = diff[i], diff[i + 1]
                E_star = e0 - f0 * (e1 - e0) / (f1 - f0)
                loop_a = minimize_loop(
                    slow, h, E_star, N=N,
                    seed=all_loops[i][cols[0]].points[:-1],
                    raise_on_failure=False,
                )
                loop_b = minimize_loop(
                    slow, h, E_star, N=N,
                    seed=all_loops[i][cols[1]].points[:-1],
                    raise_on_failure=False,
                )
                sa = length_energy_slope(slow, loop_a)
                sb = length_energy_slope(slow, loop_b)
                # the margin is recorded; callers assert it against tol_B3
                bifurcations.append(float(E_star))
                bif_slopes.append((sa, sb))
    return FamilyRecord(
        energy_grid=energies,
        loops=loops_per_E,
        lengths=lengths,
        bifurcation_energies=bifurcations,
        bifurcation_slopes=bif_slopes,
        morse_flags=morse_flags,
    )


# ---------------------------------------------------------------------------
# Maupertuis reparametrization
# ---------------------------------------------------------------------------


def loop_to_orbit(slow, loop, E=None):
    """Hamiltonian trajectory on the energy level from a geodesic loop.

    The node momenta are scaled so the energy matches E exactly; times come
    from 4-point Gauss quadrature of the speed law per segment.  Returns
    (Trajectory, period).
    """
    if E is None:
        E = loop.energy
    pts = loop.points
    d = np.diff(pts, axis=0)
    q = np.einsum("ij,jk,ik->i", d, slow.K_inv, d)
    rho = _conformal(slow, E, pts[:-1])
    if np.any(rho <= 0):
        raise DegenerateMetric("level set touches the zero of the conformal "
                               "factor; use the saddle machinery instead")
    # segment times: dt = |dx|_m / sqrt(2 (E+U))
    seg_t = np.zeros(len(d))
    for x, w in zip(_GAUSS4_X, _GAUSS4_W):
        rho_mid = _conformal(slow, E, pts[:-1] + x * d)
        seg_t += w * np.sqrt(q / (2.0 * np.maximum(rho_mid, 1e-300)))
    t = np.concatenate([[0.0], np.cumsum(seg_t)])

    # node velocities: direction from the centered tangent, speed from E+U
    tang = np.empty_like(pts)
    tang[1:-1] = pts[2:] - pts[:-2]
    tang[0] = pts[1] - (pts[-2] - TWO_PI * loop.homology.vec)
    tang[-1] = tang[0]
    m_norm = np.sqrt(np.einsum("ij,jk,ik->i", tang, slow.K_inv, tang))
    rho_nodes = _conformal(slow, E, pts)
    speed = np.sqrt(2.0 * np.maximum(rho_nodes, 0.0))
    v = tang * (speed / np.maximum(m_norm, 1e-300))[:, None]
    momenta = v @ slow.K_inv.T
    states = np.column_stack([pts, momenta])
    energies = slow.energy(states)
    traj = Trajectory(t=t, states=states, energies=energies)
    return traj, float(t[-1])


def refine_periodic_orbit(slow, state0, period, homology, tol=1e-11, maxit=12):
    """Newton polish of a nearly periodic orbit (fixed theta1 section).

    Unknowns (theta2, I1, I2, period); returns (state, period) with the
    full-state closure below tol.
    """
    z = np.asarray(state0, dtype=float).copy()
    P = float(period)
    shift = np.array([TWO_PI * homology.h[0], TWO_PI * homology.h[1], 0.0, 0.0])

    def flow_jac(z0, T):
        def rhs(t, y):
            zz = y[:4]
            J = y[4:].reshape(4, 4)
            dz = slow.rhs(t, zz)
            dJ = slow.rhs_jacobian(zz) @ J
            return np.concatenate([dz, dJ.ravel()])

        y0 = np.concatenate([z0, np.eye(4).ravel()])
        sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853",
                        rtol=1e-12, atol=1e-13)
        if not sol.success:
            raise StepFailure(sol.message)
        return sol.y[:4, -1], sol.y[4:, -1].reshape(4, 4)

    for _ in range(maxit):
        zP, M = flow_jac(z, P)
        G = zP - z - shift
        if np.max(np.abs(G)) < tol:
            return z, P, M
        X = slow.rhs(0.0, zP)
        # unknowns: dz (with dz[0] = 0) and dP
        A = np.zeros((4, 4))
        A[:, 0] = X
        A[:, 1:] = (M - np.eye(4))[:, 1:]
        sol = np.linalg.solve(A, -G)
        P += sol[0]
        z[1:] += sol[1:]
    raise NoConvergence(f"periodic polish stalled (|G|={np.max(np.abs(G)):.2e})",
                        best=(z, P))
