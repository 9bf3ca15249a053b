"""Exception hierarchy shared by the transform, engine and solver modules."""

from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by :mod:`grbsde_lab`."""


class ConfigurationError(LabError, ValueError):
    """Invalid or degenerate configuration (e.g. ``phi(D) == 0``)."""


class DomainError(LabError, ValueError):
    """Argument outside the domain of a transform (e.g. ``x < D``)."""


class RangeError(LabError, ValueError):
    """Argument outside the range of an inverse transform."""


class DivergenceError(LabError, ArithmeticError):
    """An integral that should be finite diverged."""


class BracketError(LabError, ArithmeticError):
    """Root bracketing or refinement failed within the iteration cap."""

    def __init__(self, message: str, bracket: tuple[float, float] | None = None):
        super().__init__(message)
        self.bracket = bracket


class MembershipError(LabError, ValueError):
    """A point ``(x, c, eta)`` lies outside the admissible set.

    ``deficit`` is ``H(F^{-1}(x, c)) - eta`` at the offending point and
    ``index`` the flat (or multi-) index of that point when known.
    """

    def __init__(self, message: str, deficit: float, index=None):
        super().__init__(message)
        self.deficit = deficit
        self.index = index


class BarrierCrossingError(LabError, ValueError):
    """Lower barrier above upper barrier, or terminal value outside them."""

    def __init__(self, message: str, path: int | None = None, node: int | None = None):
        super().__init__(message)
        self.path = path
        self.node = node


class MeshMismatchError(LabError, ValueError):
    """Two panels were built on different meshes or ensembles."""
