"""Exception taxonomy shared across the package."""


class NhicError(Exception):
    """Base class for all toolkit errors."""


# --- system model -----------------------------------------------------------

class NoSolution(NhicError):
    """Root finding failed from every starting point."""


class Degenerate(NhicError):
    """Jacobian singular at a candidate solution."""


class NonUniqueMinimum(NhicError):
    """The slow potential has more than one global minimum."""


class NearResonantSpectrum(NhicError):
    """Saddle rates too close to produce a reliable splitting."""


class StepFailure(NhicError):
    """Adaptive integration failed (step size underflow or solver abort)."""


# --- geodesics --------------------------------------------------------------

class DegenerateMetric(NhicError):
    """The Jacobi conformal factor changes sign along the curve."""


class NoConvergence(NhicError):
    """Iteration hit the step limit; best iterate attached."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NotABasis(NhicError):
    """The two homology classes do not generate the integer lattice."""


class B2Violation(NhicError):
    """More than two distinct shortest loops at one energy."""


# --- normal form ------------------------------------------------------------

class OrderSolveFailure(NhicError):
    """A homological equation was singular (non-hyperbolic input)."""


class SmallDivisor(NhicError):
    """Non-resonant divisor below tolerance for a monomial that is not
    exactly resonant."""

    def __init__(self, message, exponent=None, divisor=None):
        super().__init__(message)
        self.exponent = exponent
        self.divisor = divisor


class NoValidRadius(NhicError):
    """No admissible domain radius even at the smallest scanned value."""


# --- saddle boundary value problem ------------------------------------------

class NoContraction(NhicError):
    """Picard sweeps stopped contracting (domain too large)."""


class ToleranceStall(NhicError):
    """Picard updates stalled above the requested tolerance."""


class EscapedDomain(NhicError):
    """Orbit left the validity ball before reaching the target section.

    This is the defined 'undefined' outcome of a local map, not a fault.
    """


class MaxTimeExceeded(NhicError):
    """Integration hit the time cap before the requested event."""


class InsufficientSpread(NhicError):
    """Boundary family spans too small a range for a power-law fit."""


class EmptyRestrictedCone(NhicError):
    """Restricted cone empty at the requested point (T below feasibility)."""


class CurveEscaped(NhicError):
    """A rectangle side left the validity ball during construction."""


# --- shadowing orbits -------------------------------------------------------

class NoMatch(NhicError):
    """Homoclinic shooting failed to match the stable manifold."""


class WrongHomology(NhicError):
    """Closed loop has an unexpected homology class."""


class SectionMiss(NhicError):
    """Continued orbit failed to cross the target section in time."""


class CertificateFailure(NhicError):
    """Isolating-block certification failed."""

    def __init__(self, message, clause=None, report=None):
        super().__init__(message)
        self.clause = clause
        self.report = report


class NewtonDivergence(NhicError):
    """Newton iteration left the trust region without converging."""


class PairingFailure(NhicError):
    """No partner parameter matching the requested energy."""


class WordDomainEmpty(NhicError):
    """Domain of a word-composed map degenerated at the given energy."""


# --- cylinder assembly ------------------------------------------------------

class GapInFamily(NhicError):
    """Adjacent orbits in a family are farther apart than mesh tolerance."""


class ConeEscape(NhicError):
    """A propagated vector left the prescribed cone."""


class GapFailure(NhicError):
    """Measured normal/tangential exponents do not leave a spectral gap."""


class BlockFailure(NhicError):
    """Perturbed isolating-block conditions failed (epsilon too large)."""


class FloquetOnCircle(NhicError):
    """Transverse multipliers too close to the unit circle."""


# --- configuration / CLI ----------------------------------------------------

class ParseError(NhicError):
    """Malformed configuration text."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class SchemaError(NhicError):
    """Structurally valid text with an invalid or unknown key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class StageFailure(NhicError):
    """A pipeline stage raised; upstream context attached."""

    def __init__(self, message, stage=None, cause=None):
        super().__init__(message)
        self.stage = stage
        self.cause = cause


class UnknownKind(NhicError):
    """Unsupported export kind."""
