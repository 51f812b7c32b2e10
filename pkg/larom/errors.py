"""Exception hierarchy shared by every larom module.

The CLI turns any ``LaromError`` into a ``click.ClickException``; library callers
can catch the specific subclasses and use the recovery data they carry.
"""

from typing import Any, Optional, Sequence


class LaromError(Exception):
    """Base class for all larom failures."""


class InvalidArgumentError(LaromError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(LaromError):
    """Configuration file could not be interpreted."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(LaromError):
    """Malformed text input (mesh, field or metric files)."""

    def __init__(self, message: str, line: Optional[int] = None, path: Any = None):
        self.line = line
        self.path = path
        where = f"{path}:" if path is not None else ""
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class DegenerateDensityError(LaromError):
    """Equidistribution density integrates to zero."""


class InvalidStateError(LaromError):
    """A conserved state has nonpositive density or pressure."""


class StateEvaluationError(InvalidStateError):
    """Invalid or non-finite state found while assembling on an element."""

    def __init__(self, element: int, message: str = "invalid state"):
        self.element = int(element)
        super().__init__(f"{message} in element {self.element}")


class InconsistentDataError(LaromError):
    """Boundary data admit no subsonic free-stream state."""


class PtcNonConvergenceError(LaromError):
    """Pseudo-transient continuation hit its iteration cap or could not find an admissible update."""

    def __init__(self, message: str, state: Any = None, history: Sequence = ()):
        self.state = state
        self.history = list(history)
        super().__init__(message)


class NonBijectiveMapError(LaromError):
    """A registration map has a nonpositive derivative somewhere."""


class DegenerateBasisError(LaromError):
    """Gram-Schmidt on the map seeds lost rank."""


class UndefinedLocatorError(LaromError):
    """Shock locator called on a field without gradients."""


class RegistrationFailedError(LaromError):
    """Too many parameters failed registration."""

    def __init__(self, message: str, failures: Sequence = ()):
        self.failures = list(failures)
        super().__init__(message)


class IndefiniteGramError(LaromError):
    """A Gram matrix that must be SPD is not."""


class StalledGnmError(LaromError):
    """Gauss-Newton line search could not decrease the objective."""

    def __init__(self, message: str, alpha: Any = None, history: Sequence = ()):
        self.alpha = alpha
        self.history = list(history)
        super().__init__(message)


class DegenerateEqError(LaromError):
    """Empirical quadrature weights have empty support."""


class InvalidMeshError(LaromError):
    """Triangle mesh is unusable (isolated vertices, bad indices)."""


class OutOfDomainError(LaromError):
    """A query point lies outside the mesh."""


class InvalidMetricError(LaromError):
    """A tensor that must be symmetric positive definite is not."""


class DegenerateTriangleError(LaromError):
    """Triangle with zero area."""


class PhaseError(LaromError):
    """A phase of the adaptive loop failed; carries the partial report."""

    def __init__(self, phase: str, cause: BaseException, report: Any = None):
        self.phase = phase
        self.cause = cause
        self.report = report
        super().__init__(f"{phase} failed: {cause}")
