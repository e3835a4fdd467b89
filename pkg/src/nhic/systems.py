"""Fast Hamiltonian model, double-resonance reduction, and slow-system flows.

Conventions fixed here and used everywhere else:

* angles (both torus angles and the time angle of the periodic forcing)
  have period 2*pi, so a resonance ``(k1, k2, k0)`` means the phase
  ``k1*theta1 + k2*theta2 + k0*t`` is slow;
* the slow kinetic energy is ``K(I) = 0.5 <K_matrix I, I>`` with
  ``K_matrix = B Hess(H0) B^T`` (the 1/2 makes the reduced and full flows
  agree numerically);
* the slow Hamiltonian is ``H = K(I) - U(theta)`` with ``U >= 0`` and the
  minimum translated to ``theta = 0``, so the origin is a saddle of the
  flow with real rates ``0 < lambda1 < lambda2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    Degenerate,
    NearResonantSpectrum,
    NonUniqueMinimum,
    NoSolution,
    StepFailure,
)
from .poly import SparsePoly

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Fourier series on T^2
# ---------------------------------------------------------------------------


class Fourier2:
    """Finite Fourier series on the two-torus.

    ``value(theta) = sum_j a_j cos(m_j . theta) + b_j sin(m_j . theta)``.
    """

    def __init__(self, modes=None):
        # modes: iterable of (m1, m2, cos_coeff, sin_coeff); duplicates merged
        merged = {}
        for m1, m2, a, b in modes or []:
            key = (int(m1), int(m2))
            ca, cb = merged.get(key, (0.0, 0.0))
            merged[key] = (ca + float(a), cb + float(b))
        items = sorted(merged.items())
        self.m = np.array([k for k, _ in items], dtype=float).reshape(-1, 2)
        self.a = np.array([v[0] for _, v in items])
        self.b = np.array([v[1] for _, v in items])

    @property
    def modes(self):
        return [
            (int(m1), int(m2), a, b)
            for (m1, m2), a, b in zip(self.m.astype(int), self.a, self.b)
        ]

    def is_zero(self, tol=0.0):
        return bool(np.all(np.abs(self.a) <= tol) and np.all(np.abs(self.b) <= tol))

    def value(self, theta):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        pts = theta[None, :] if single else theta
        if self.m.size == 0:
            out = np.zeros(pts.shape[0])
            return out[0] if single else out
        phases = pts @ self.m.T
        out = np.cos(phases) @ self.a + np.sin(phases) @ self.b
        return out[0] if single else out

    __call__ = value

    def grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        pts = theta[None, :] if single else theta
        if self.m.size == 0:
            out = np.zeros_like(pts)
            return out[0] if single else out
        phases = pts @ self.m.T
        weights = -np.sin(phases) * self.a + np.cos(phases) * self.b
        out = weights @ self.m
        return out[0] if single else out

    def hess(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.m.size == 0:
            return np.zeros((2, 2))
        phases = self.m @ theta
        weights = -np.cos(phases) * self.a - np.sin(phases) * self.b
        return (self.m.T * weights) @ self.m

    def shifted(self, theta0):
        """Series of theta -> value(theta + theta0)."""
        theta0 = np.asarray(theta0, dtype=float)
        out = []
        for (m1, m2), a, b in zip(self.m, self.a, self.b):
            phi = m1 * theta0[0] + m2 * theta0[1]
            out.append(
                (
                    m1,
                    m2,
                    a * math.cos(phi) + b * math.sin(phi),
                    -a * math.sin(phi) + b * math.cos(phi),
                )
            )
        return Fourier2(out)

    def plus_constant(self, c):
        return Fourier2(self.modes + [(0, 0, c, 0.0)])

    def scaled(self, c):
        return Fourier2([(m1, m2, c * a, c * b) for m1, m2, a, b in self.modes])

    def taylor(self, degree):
        """Taylor polynomial at theta = 0 as a SparsePoly in (theta1, theta2)."""
        total = SparsePoly.zero(2, trunc=degree)
        for (m1, m2), a, b in zip(self.m, self.a, self.b):
            lin = SparsePoly(2, {(1, 0): m1, (0, 1): m2}, trunc=degree)
            powers = [SparsePoly.constant(2, 1.0, trunc=degree)]
            for _ in range(degree):
                powers.append(powers[-1] * lin)
            if a:
                for j in range(0, degree + 1, 2):
                    total = total + powers[j] * (a * (-1) ** (j // 2) / math.factorial(j))
            if b:
                for j in range(1, degree + 1, 2):
                    total = total + powers[j] * (b * (-1) ** (j // 2) / math.factorial(j))
        return total


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class FastHamiltonian:
    """Nearly integrable model: quadratic integrable part plus a finite
    Fourier perturbation evaluated at frozen momentum."""

    hessian: np.ndarray
    h1_modes: list  # entries (k1, k2, kt, cos_coeff, sin_coeff)
    epsilon: float
    gradient_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.gradient_offset = np.asarray(self.gradient_offset, dtype=float)
        if self.hessian.shape != (2, 2):
            raise ValueError("hessian must be 2x2")
        if not np.allclose(self.hessian, self.hessian.T, atol=1e-12):
            raise ValueError("hessian must be symmetric")
        if np.any(np.linalg.eigvalsh(self.hessian) <= 0):
            raise ValueError("hessian must be positive definite (strict convexity)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        merged = {}
        for k1, k2, kt, a, b in self.h1_modes:
            key = (int(k1), int(k2), int(kt))
            ca, cb = merged.get(key, (0.0, 0.0))
            merged[key] = (ca + float(a), cb + float(b))
        self.h1_modes = [
            (k[0], k[1], k[2], v[0], v[1]) for k, v in sorted(merged.items())
        ]

    def grad_h0(self, p):
        return self.hessian @ np.asarray(p, dtype=float) + self.gradient_offset

    def h0(self, p):
        p = np.asarray(p, dtype=float)
        return 0.5 * p @ self.hessian @ p + self.gradient_offset @ p

    def h1(self, theta, t):
        out = 0.0
        for k1, k2, kt, a, b in self.h1_modes:
            phase = k1 * theta[0] + k2 * theta[1] + kt * t
            out += a * math.cos(phase) + b * math.sin(phase)
        return out


@dataclass
class ResonancePair:
    """Two independent resonance covectors (k1_vec, k0) and (k1'_vec, k0')."""

    k: tuple  # (2-int-vector, int)
    k_prime: tuple

    def __post_init__(self):
        v1 = np.asarray(self.k[0], dtype=int)
        v2 = np.asarray(self.k_prime[0], dtype=int)
        self.k = (v1, int(self.k[1]))
        self.k_prime = (v2, int(self.k_prime[1]))
        if abs(v1[0] * v2[1] - v1[1] * v2[0]) == 0:
            raise ValueError("resonance vectors must be linearly independent")

    @property
    def B(self):
        return np.array([self.k[0], self.k_prime[0]], dtype=float)

    @property
    def k0_vec(self):
        return np.array([self.k[1], self.k_prime[1]], dtype=float)


@dataclass
class SlowSystem:
    """Mechanical system K(I) - U(theta) on T^2 with K(I) = 0.5 <K_matrix I, I>."""

    K_matrix: np.ndarray
    U: Fourier2
    B_matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    c0: float = 0.0
    p0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    label: str = ""

    def __post_init__(self):
        self.K_matrix = np.asarray(self.K_matrix, dtype=float)
        self.B_matrix = np.asarray(self.B_matrix, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        self.theta_shift = np.asarray(self.theta_shift, dtype=float)
        if np.any(np.linalg.eigvalsh(self.K_matrix) <= 0):
            raise ValueError("K_matrix must be positive definite")
        if abs(np.linalg.det(self.B_matrix)) < 1e-12:
            raise ValueError("B_matrix must be nonsingular")
        # cheap necessary conditions for the normalization contract
        if abs(self.U.value(np.zeros(2))) > 1e-7:
            raise ValueError("U(0) must vanish after normalization")
        if np.linalg.norm(self.U.grad(np.zeros(2))) > 1e-7:
            raise ValueError("grad U(0) must vanish after normalization")
        self._K_inv = np.linalg.inv(self.K_matrix)

    @property
    def K_inv(self):
        return self._K_inv

    def kinetic(self, momentum):
        momentum = np.asarray(momentum, dtype=float)
        return 0.5 * momentum @ self.K_matrix @ momentum

    def energy(self, state):
        state = np.asarray(state, dtype=float)
        if state.ndim == 1:
            return self.kinetic(state[2:]) - self.U.value(state[:2])
        kin = 0.5 * np.einsum("ij,jk,ik->i", state[:, 2:], self.K_matrix, state[:, 2:])
        return kin - self.U.value(state[:, :2])

    def rhs(self, t, state):
        theta = state[:2]
        momentum = state[2:]
        return np.concatenate([self.K_matrix @ momentum, self.U.grad(theta)])

    def rhs_jacobian(self, state):
        J = np.zeros((4, 4))
        J[:2, 2:] = self.K_matrix
        J[2:, :2] = self.U.hess(state[:2])
        return J

    def hamiltonian_taylor(self, degree):
        """Taylor polynomial of K(I) - U(theta) at the origin, in variables
        (theta1, theta2, I1, I2)."""
        u_part = self.U.taylor(degree)
        coeffs = {}
        for (e1, e2), c in u_part.coeffs.items():
            coeffs[(e1, e2, 0, 0)] = -c
        for i in range(2):
            for j in range(2):
                if self.K_matrix[i, j] != 0.0:
                    e = [0, 0, 0, 0]
                    e[2 + i] += 1
                    e[2 + j] += 1
                    key = tuple(e)
                    coeffs[key] = coeffs.get(key, 0.0) + 0.5 * self.K_matrix[i, j]
        return SparsePoly(4, coeffs, trunc=degree).prune()


@dataclass
class PhasePoint:
    """Point on T^2 x R^2, with an optional time for the periodic system."""

    theta: np.ndarray
    momentum: np.ndarray
    time: float | None = None

    def __post_init__(self):
        self.theta = np.mod(np.asarray(self.theta, dtype=float), TWO_PI)
        self.momentum = np.asarray(self.momentum, dtype=float)

    @property
    def state(self):
        return np.concatenate([self.theta, self.momentum])


@dataclass
class Trajectory:
    """Sampled trajectory with lifted (unwrapped) angle coordinates."""

    t: np.ndarray
    states: np.ndarray  # (n, 4): theta1, theta2, I1, I2
    energies: np.ndarray

    def points(self):
        return [PhasePoint(s[:2], s[2:], time=tt) for tt, s in zip(self.t, self.states)]

    def energy_drift(self):
        return float(np.max(np.abs(self.energies - self.energies[0])))

    def write_csv(self, path):
        header = "t,theta1,theta2,I1,I2,E"
        data = np.column_stack([self.t, self.states, self.energies])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


@dataclass
class SaddleSpectrum:
    """Saddle rates and the symplectic eigenbasis (columns s1, s2, u1, u2)."""

    lambda1: float
    lambda2: float
    eigenbasis: np.ndarray
    rational_relation: tuple | None = None  # (p, q) with q*lambda2 == p*lambda1

    SYMPLECTIC_TOL = 1e-10

    def __post_init__(self):
        self.eigenbasis = np.asarray(self.eigenbasis, dtype=float)
        if not (0 < self.lambda1 < self.lambda2):
            raise ValueError("need 0 < lambda1 < lambda2")
        defect = self.symplectic_defect()
        if defect > self.SYMPLECTIC_TOL:
            raise ValueError(f"eigenbasis not symplectic (defect {defect:.2e})")

    def symplectic_defect(self):
        C = self.eigenbasis
        return float(
            np.max(np.abs(C.T @ OMEGA_PHASE @ C - OMEGA_SADDLE))
        )

    @property
    def rates(self):
        return np.array([self.lambda1, self.lambda2])

    @property
    def lambda2_eff(self):
        """min(lambda2, 2*lambda1): the rate governing weak-component bounds."""
        return min(self.lambda2, 2.0 * self.lambda1)


# omega(v, w) = v^T OMEGA w; phase coordinates z = (theta, I), saddle
# coordinates w = (s1, s2, u1, u2).
OMEGA_PHASE = np.block(
    [[np.zeros((2, 2)), -np.eye(2)], [np.eye(2), np.zeros((2, 2))]]
)
OMEGA_SADDLE = np.block(
    [[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]]
)


@dataclass
class SaddleAssumptions:
    """Verification record for the saddle hypotheses of the slow system."""

    unique_minimum: bool
    hessian_positive: bool
    minimum_theta: np.ndarray
    minimum_value: float
    extra_minima: list
    lambda1: float
    lambda2: float
    rates_distinct: bool
    gap: float

    @property
    def passed(self):
        return self.unique_minimum and self.hessian_positive and self.rates_distinct


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def locate_double_resonance(fast, res, tol=1e-13, grid_n=5):
    """Momentum at which both resonance relations vanish.

    Newton from a grid of starts over the unit ball; a single step suffices
    for quadratic integrable parts but the iteration is kept generic.
    """
    B = res.B
    k0 = res.k0_vec

    def residual(p):
        return B @ fast.grad_h0(p) + k0

    best = None
    for x0 in np.linspace(-1.0, 1.0, grid_n):
        for y0 in np.linspace(-1.0, 1.0, grid_n):
            p = np.array([x0, y0])
            for _ in range(50):
                r = residual(p)
                if np.linalg.norm(r, ord=np.inf) < tol:
                    break
                J = B @ fast.hessian
                if abs(np.linalg.det(J)) < 1e-14:
                    raise Degenerate("singular resonance Jacobian at candidate")
                p = p - np.linalg.solve(J, r)
            r = residual(p)
            if np.linalg.norm(r, ord=np.inf) < 1e-12:
                if best is None or np.linalg.norm(p) < np.linalg.norm(best):
                    best = p
    if best is None:
        raise NoSolution("no double resonance found from any grid start")
    return best


def resonant_combination(mode_triple, res, tol=1e-9):
    """Integer coefficients (a, b) with mode = a*k + b*k', or None."""
    m = np.array(mode_triple[:2], dtype=float)
    mt = float(mode_triple[2])
    B = res.B
    ab = np.linalg.solve(B.T, m)
    ab_int = np.round(ab)
    if np.max(np.abs(ab - ab_int)) > tol:
        return None
    a, b = int(ab_int[0]), int(ab_int[1])
    if abs(a * res.k[1] + b * res.k_prime[1] - mt) > tol:
        return None
    return a, b


def reduce_to_slow(fast, res, p0, grid_n=512):
    """Average over the fast direction: keep the resonant-lattice modes.

    Returns the normalized slow system (minimum of U translated to 0 and
    its value subtracted); the applied translation is recorded in
    ``theta_shift``.
    """
    p0 = np.asarray(p0, dtype=float)
    B = res.B
    K_mat = B @ fast.hessian @ B.T

    z_modes = []
    for k1, k2, kt, a, b in fast.h1_modes:
        ab = resonant_combination((k1, k2, kt), res)
        if ab is not None:
            z_modes.append((ab[0], ab[1], a, b))
    u_raw = Fourier2([(m1, m2, -a, -b) for m1, m2, a, b in z_modes])

    if u_raw.is_zero():
        u_final = Fourier2([])
        theta_min = np.zeros(2)
    else:
        theta_min, u_min, extra = _global_minima(u_raw, grid_n)
        if extra:
            raise NonUniqueMinimum(
                f"slow potential has {1 + len(extra)} global minima; "
                f"first two at {theta_min} and {extra[0]}"
            )
        u_final = u_raw.shifted(theta_min).plus_constant(-u_min)

    c0 = fast.h0(p0) + res.k0_vec @ np.linalg.solve(B.T, p0)
    return SlowSystem(
        K_matrix=K_mat,
        U=u_final,
        B_matrix=B,
        c0=c0,
        p0=p0,
        theta_shift=theta_min,
    )


def _global_minima(u, grid_n=512, sep_tol=1e-6, val_tol=1e-9):
    """Global minimum by dense grid scan plus Newton refinement.

    Returns (argmin, min value, list of further distinct global minima).
    """
    grid = np.linspace(0.0, TWO_PI, grid_n, endpoint=False)
    T1, T2 = np.meshgrid(grid, grid, indexing="ij")
    pts = np.column_stack([T1.ravel(), T2.ravel()])
    vals = u.value(pts).reshape(grid_n, grid_n)

    local_min = np.ones_like(vals, dtype=bool)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
        local_min &= vals <= np.roll(np.roll(vals, di, axis=0), dj, axis=1)
    vmin_grid = vals.min()
    cand_idx = np.argwhere(local_min & (vals < vmin_grid + 1e-4 + 1e-6 * abs(vmin_grid)))

    refined = []
    for i, j in cand_idx:
        th = np.array([grid[i], grid[j]])
        for _ in range(60):
            g = u.grad(th)
            H = u.hess(th)
            if abs(np.linalg.det(H)) < 1e-14:
                break
            step = np.linalg.solve(H, g)
            th = th - step
            if np.linalg.norm(step) < 1e-14:
                break
        refined.append((np.mod(th, TWO_PI), float(u.value(th))))

    refined.sort(key=lambda tv: tv[1])
    theta_min, u_min = refined[0]
    extras = []
    for th, v in refined[1:]:
        if v > u_min + val_tol:
            continue
        d = np.abs(th - theta_min)
        d = np.minimum(d, TWO_PI - d)
        if np.linalg.norm(d) > sep_tol and all(
            np.linalg.norm(np.minimum(np.abs(th - e), TWO_PI - np.abs(th - e))) > sep_tol
            for e in extras
        ):
            extras.append(th)
    return theta_min, u_min, extras


def saddle_rates(slow):
    """Rates (lambda1, lambda2) and the momentum-shape eigvectors of the
    linearized flow at the origin."""
    Q = slow.U.hess(np.zeros(2))  # Hessian of U at the minimum
    M = slow.K_matrix
    Ms = _sqrtm_spd(M)
    S = Ms @ Q @ Ms
    S = 0.5 * (S + S.T)
    mu, W = np.linalg.eigh(S)
    if np.any(mu <= 0):
        raise Degenerate("linearization is not hyperbolic (U Hessian not PD)")
    lam = np.sqrt(mu)
    return lam, Ms, Q, W


def _sqrtm_spd(M):
    w, V = np.linalg.eigh(M)
    return V @ np.diag(np.sqrt(w)) @ V.T


def check_saddle_assumptions(slow, grid_n=512, tol_gap=1e-6):
    """Uniqueness/nondegeneracy of the potential minimum and distinctness of
    the saddle rates; failures are reported, never raised."""
    if slow.U.is_zero():
        theta_min, u_min, extras = np.zeros(2), 0.0, ["flat potential"]
        hess_pos = False
    else:
        theta_min, u_min, extras = _global_minima(slow.U, grid_n)
        hess = slow.U.hess(theta_min)
        hess_pos = bool(np.all(np.linalg.eigvalsh(hess) > 0))
    unique = not extras

    lam1 = lam2 = float("nan")
    distinct = False
    if hess_pos:
        lam, _, _, _ = saddle_rates(slow)
        lam1, lam2 = float(lam[0]), float(lam[1])
        distinct = (lam2 - lam1) > tol_gap
    return SaddleAssumptions(
        unique_minimum=unique,
        hessian_positive=hess_pos,
        minimum_theta=theta_min,
        minimum_value=u_min,
        extra_minima=extras if isinstance(extras, list) else [],
        lambda1=lam1,
        lambda2=lam2,
        rates_distinct=distinct,
        gap=lam2 - lam1 if distinct or not math.isnan(lam1) else float("nan"),
    )


def detect_rational_relation(lam1, lam2, max_order=12, tol=None):
    """Small-integer relation q*lambda2 = p*lambda1, if one holds to
    near machine precision."""
    if tol is None:
        tol = 1e-10 * (lam1 + lam2)
    for q in range(1, max_order + 1):
        for p in range(1, max_order + 1):
            if math.gcd(p, q) != 1:
                continue
            if abs(q * lam2 - p * lam1) < tol:
                return (p, q)
    return None


def linearize_at_origin(slow, tol_gap=1e-6):
    """Symplectic linear chart turning the quadratic part of the slow
    Hamiltonian into lambda1*s1*u1 + lambda2*s2*u2.

    Columns of the eigenbasis are the s1, s2, u1, u2 directions in
    (theta, I) coordinates.
    """
    lam, Ms, Q, W = saddle_rates(slow)
    if lam[1] - lam[0] < tol_gap:
        raise NearResonantSpectrum(
            f"rates {lam[0]:.6g}, {lam[1]:.6g} closer than {tol_gap:g}"
        )
    cols = np.zeros((4, 4))
    for i in range(2):
        a = Ms @ W[:, i]
        # sign gauge: dominant angle component of the eigendirection positive,
        # so +u_i leaves toward +theta and +s_i returns from -theta (the
        # orientation a homoclinic loop actually realizes)
        j = int(np.argmax(np.abs(a)))
        if a[j] < 0:
            a = -a
        qa = Q @ a / lam[i]
        alpha = 1.0 / math.sqrt(2.0 * lam[i])
        cols[:, i] = alpha * np.concatenate([-a, qa])       # s_i
        cols[:, 2 + i] = alpha * np.concatenate([a, qa])    # u_i
    relation = detect_rational_relation(lam[0], lam[1])
    return SaddleSpectrum(
        lambda1=float(lam[0]),
        lambda2=float(lam[1]),
        eigenbasis=cols,
        rational_relation=relation,
    )


# ---------------------------------------------------------------------------
# Flows
# ---------------------------------------------------------------------------


def flow_slow(slow, x, t_span, tol=1e-12, samples=400, method="adaptive"):
    """Integrate the slow mechanical flow.

    ``method='adaptive'`` uses a high-order embedded pair; ``'leapfrog'``
    is a fixed-step symplectic alternative for long runs.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    z0 = x.state if isinstance(x, PhasePoint) else np.asarray(x, dtype=float)
    t_eval = np.linspace(0.0, t_span, samples)
    if method == "leapfrog":
        states = _leapfrog(slow, z0, t_eval)
    else:
        if t_span == 0.0:
            states = np.tile(z0, (samples, 1))
        else:
            sol = solve_ivp(
                slow.rhs,
                (0.0, t_span),
                z0,
                method="DOP853",
                rtol=tol,
                atol=tol * 1e-2,
                t_eval=t_eval,
                dense_output=False,
            )
            if not sol.success:
                raise StepFailure(f"slow flow integration failed: {sol.message}")
            states = sol.y.T
    energies = slow.energy(states)
    return Trajectory(t=t_eval, states=states, energies=energies)


def _leapfrog(slow, z0, t_eval, steps_per_unit=2000):
    # samples are taken at the nearest completed step time
    t_end = t_eval[-1]
    if t_end == 0.0:
        return np.tile(z0, (len(t_eval), 1))
    n = max(int(abs(t_end) * steps_per_unit), 1)
    h = t_end / n
    take = np.clip(np.round(np.asarray(t_eval) / h).astype(int), 0, n)
    out = np.empty((len(t_eval), 4))
    z = z0.copy()
    for k in np.where(take == 0)[0]:
        out[k] = z
    for i in range(1, n + 1):
        half = z[2:] + 0.5 * h * slow.U.grad(z[:2])
        theta = z[:2] + h * (slow.K_matrix @ half)
        mom = half + 0.5 * h * slow.U.grad(theta)
        z = np.concatenate([theta, mom])
        for k in np.where(take == i)[0]:
            out[k] = z
    return out


def flow_full(fast, res, x, t_span, tol=1e-12, samples=400, slow=None):
    """Integrate the time-periodic fast system expressed in slow variables.

    The equations are the exact rescaling of the fast flow (slow time
    tau = sqrt(eps) * t); at eps = 0 the fast-oscillating modes are dropped
    (their average), which reproduces the reduced flow exactly.
    """
    if slow is None:
        p0 = locate_double_resonance(fast, res)
        slow = reduce_to_slow(fast, res, p0)
    eps = fast.epsilon
    B = res.B
    k0 = res.k0_vec
    Bt_inv = np.linalg.inv(B.T)
    K_mat = slow.K_matrix
    shift = slow.theta_shift
    sqrt_eps = math.sqrt(eps) if eps > 0 else 0.0

    coeff_vecs = []  # c_j = B^-T m_j
    freqs = []       # residual fast frequency nu_j
    amps = []        # (a_j, b_j)
    for k1, k2, kt, a, b in fast.h1_modes:
        m = np.array([k1, k2], dtype=float)
        c = Bt_inv @ m
        nu = kt - c @ k0
        if eps == 0.0 and abs(nu) > 1e-12:
            continue  # averaged away in the limit
        coeff_vecs.append(c)
        freqs.append(nu)
        amps.append((a, b))
    coeff_vecs = np.array(coeff_vecs).reshape(-1, 2)
    freqs = np.array(freqs)
    amps = np.array(amps).reshape(-1, 2)

    res0 = B @ fast.grad_h0(slow.p0) + k0  # ~1e-12 from the resonance solve

    def rhs(tau, z):
        phi, momentum = z[:2], z[2:]
        dphi = K_mat @ momentum
        if sqrt_eps > 0:
            dphi = dphi + res0 / sqrt_eps
        raw = phi + shift
        if len(freqs):
            phases = coeff_vecs @ raw
            if sqrt_eps > 0:
                phases = phases + freqs * (tau / sqrt_eps)
            w = -amps[:, 0] * np.sin(phases) + amps[:, 1] * np.cos(phases)
            dI = -(w @ coeff_vecs)
        else:
            dI = np.zeros(2)
        return np.concatenate([dphi, dI])

    z0 = x.state if isinstance(x, PhasePoint) else np.asarray(x, dtype=float)
    t_eval = np.linspace(0.0, t_span, samples)
    sol = solve_ivp(
        rhs, (0.0, t_span), z0, method="DOP853", rtol=tol, atol=tol * 1e-2,
        t_eval=t_eval,
    )
    if not sol.success:
        raise StepFailure(f"full flow integration failed: {sol.message}")
    states = sol.y.T
    energies = slow.energy(states)
    return Trajectory(t=t_eval, states=states, energies=energies)
