"""Numerical toolkit for invariant cylinders near saddle equilibria of
slow mechanical systems on the two-torus.

The pipeline: reduce a nearly integrable fast system at a double resonance
to a slow mechanical system, verify the saddle assumptions, build a
polynomial normal form at the saddle, solve the saddle boundary-value
problem, shoot homoclinics, certify isolating blocks for composed section
maps, continue families of shadowing periodic orbits, and assemble the
invariant cylinder with a hyperbolicity certificate.  Jacobi-metric
geodesics provide the complementary route at intermediate energies.
"""

from .errors import NhicError

__all__ = ["NhicError"]
__version__ = "0.1.0"
