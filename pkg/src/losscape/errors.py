"""Exception hierarchy shared by every module."""


class LosscapeError(Exception):
    """Base class for all library errors."""


class LayoutError(LosscapeError, ValueError):
    """Parameter vectors or directions do not match the expected layout."""


class NumericError(LosscapeError, ArithmeticError):
    """A non-finite value appeared during evaluation."""


class OracleCapError(LosscapeError):
    """The dense Hessian oracle refused a model above its size cap."""


class ConfigError(LosscapeError, ValueError):
    """Invalid model, optimizer or run configuration."""


class FormatError(LosscapeError):
    """A binary file is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss; ``trajectory`` holds the snapshots kept so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class DegenerateDirectionError(LosscapeError, ValueError):
    """A direction group has zero norm while the matching parameter group does not."""

    def __init__(self, group):
        super().__init__(f"direction has zero norm in group {group!r} but parameters do not")
        self.group = group


class RankDeficiencyError(LosscapeError, ValueError):
    """Trajectory differences span fewer than two dimensions."""


class NearParallelError(LosscapeError, ValueError):
    """The two plane directions are (numerically) parallel."""


class LanczosError(LosscapeError):
    """Lanczos could not run (for example a zero starting vector)."""


class PartialResultError(LanczosError):
    """Lanczos broke down before producing the requested number of Ritz pairs."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class BenchError(LosscapeError):
    """A benchmark task failed; ``partial`` carries the measurements collected so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
