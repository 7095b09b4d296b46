"""Exception types shared across the toolkit."""


class TrajlibError(Exception):
    """Base class for all toolkit errors."""


class NonConvergence(TrajlibError):
    """Inner collision solver exceeded its iteration cap."""


class DegenerateGeometry(TrajlibError):
    """Coincident origins with zero-size shapes; no scaling factor exists."""


class DimensionMismatch(TrajlibError):
    """Vector or matrix dimensions do not match the robot model."""


class SingularMassMatrix(TrajlibError):
    """Mass matrix factorization failed; inertial data is inconsistent."""


class UnknownFrame(TrajlibError):
    """Requested frame name does not exist on the model."""


class InfeasibleGoal(TrajlibError):
    """Goal cannot be reached without violating collision constraints."""


class InvalidSpec(TrajlibError):
    """Problem specification violates its invariants."""


class DomainError(TrajlibError):
    """Evaluation argument outside the curve's domain."""


class OutOfGrid(TrajlibError):
    """Query point lies outside the library's grid bounding box."""


class IncompleteCell(TrajlibError):
    """An enclosing grid cell has unsolved corners."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class CorruptFile(TrajlibError):
    """File is truncated or fails structural validation."""


class VersionMismatch(TrajlibError):
    """File carries an unsupported format version."""


class SceneError(TrajlibError):
    """Scene description failed to parse or validate."""
