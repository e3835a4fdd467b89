"""Canonical test systems fixed in the repository.

* ``pend0``  -- decoupled pendulum product, rates (sqrt(0.4), 1).
* ``pendc``  -- pend0 plus a weak angle coupling; the generic workhorse.
* ``two_channel`` -- two competing channels in class (1,0) whose lengths
  exchange global optimality at one energy (used for bifurcation and
  band-cylinder tests).
* ``split_channel`` -- mirror-symmetric potential whose class-(1,0)
  minimizers split into an off-axis pair; supplies two same-sign
  homoclinics for word-composed orbits.
* ``flat`` -- zero potential (integrable; every certificate must reject it).
"""

from __future__ import annotations

import numpy as np

from .systems import FastHamiltonian, Fourier2, ResonancePair, SlowSystem


def pend0():
    u = Fourier2([(0, 0, 1.4, 0.0), (1, 0, -0.4, 0.0), (0, 1, -1.0, 0.0)])
    return SlowSystem(K_matrix=np.eye(2), U=u, label="pend0")


def pendc():
    u = Fourier2(
        [
            (0, 0, 1.45, 0.0),
            (1, 0, -0.4, 0.0),
            (0, 1, -1.0, 0.0),
            (1, -1, -0.05, 0.0),
        ]
    )
    return SlowSystem(K_matrix=np.eye(2), U=u, label="pendc")


def two_channel():
    # 0.5(1-cos t2) + 0.3(1-cos 2t2) + 1.1(1-cos t1)(1+cos t2)/2:
    # straight channel at t2=0 (zero floor, steep length growth in E) vs
    # flat channel at t2=pi (floor 1.0); lengths cross once.
    u = Fourier2(
        [
            (0, 0, 1.35, 0.0),
            (0, 1, 0.05, 0.0),
            (0, 2, -0.3, 0.0),
            (1, 0, -0.55, 0.0),
            (1, 1, -0.275, 0.0),
            (1, -1, -0.275, 0.0),
        ]
    )
    return SlowSystem(K_matrix=np.eye(2), U=u, label="two_channel")


def split_channel():
    # 0.4(1-c1)(1-2.5(1-c2)) + 2.2(1-c2) - 0.3(1-cos 2t2): ridge along
    # theta2=0 away from the saddle, so the two (1,0)-minimizers bow off
    # axis symmetrically; saddle Hessian stays diag(0.4, 1.0).
    u = Fourier2(
        [
            (0, 0, 1.3, 0.0),
            (1, 0, 0.6, 0.0),
            (0, 1, -1.2, 0.0),
            (1, -1, -0.5, 0.0),
            (1, 1, -0.5, 0.0),
            (0, 2, 0.3, 0.0),
        ]
    )
    return SlowSystem(K_matrix=np.eye(2), U=u, label="split_channel")


def flat():
    return SlowSystem(K_matrix=np.eye(2), U=Fourier2([]), label="flat")


def pendc_fast(epsilon=1e-4, with_decoy=True):
    """Fast system whose reduction at the (1,0)x(0,1) double resonance of
    H0 = |p|^2/2 is exactly ``pendc`` (no translation needed); an optional
    non-resonant decoy mode exercises the lattice filter and the
    sqrt(eps) conjugacy error."""
    modes = [
        (1, 0, 0, 0.4, 0.0),
        (0, 1, 0, 1.0, 0.0),
        (1, -1, 0, 0.05, 0.0),
    ]
    if with_decoy:
        modes.append((1, 0, 3, 0.3, 0.0))
    fast = FastHamiltonian(hessian=np.eye(2), h1_modes=modes, epsilon=epsilon)
    res = ResonancePair(k=((1, 0), 0), k_prime=((0, 1), 0))
    return fast, res


PRESETS = {
    "pend0": pend0,
    "pendc": pendc,
    "two_channel": two_channel,
    "split_channel": split_channel,
    "flat": flat,
}


def by_name(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None
