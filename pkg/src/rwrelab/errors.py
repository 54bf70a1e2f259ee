"""Exception and warning types shared across the package."""


class RwreLabError(Exception):
    """Base class for all errors raised by this package."""


class AssumptionViolated(RwreLabError):
    """The environment law is recurrent or otherwise outside the model."""


class NoRoot(RwreLabError):
    """No positive solution of E[rho^kappa] = 1 in the search interval."""


class BlockOverflow(RwreLabError):
    """A single ladder block exceeded the configured site cap."""


class BufferExhausted(RwreLabError):
    """A truncated series did not converge before the window edge."""


class DegenerateWindow(RwreLabError):
    """A sampling window has non-positive length."""


class WindowExit(RwreLabError):
    """A path left the finite window before the requested horizon."""


class SupportNotCovered(RwreLabError):
    """The atoms do not cover the support of a profile function."""


class InsufficientSamples(RwreLabError):
    """Too few (or degenerate) samples for a tail estimate."""


class ConfigError(RwreLabError):
    """Invalid experiment configuration."""


class StiffnessWarning(UserWarning):
    """Trap depths span more than nine orders of magnitude."""
