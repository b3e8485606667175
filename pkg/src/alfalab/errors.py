"""Exception types shared across the package."""


class AlfaError(Exception):
    """Base class for every error raised by alfalab."""


class ShapeError(AlfaError, ValueError):
    pass


class RankError(AlfaError, ValueError):
    pass


class ContractError(AlfaError, ValueError):
    """A precondition of an operation does not hold."""


class ParameterError(AlfaError, ValueError):
    pass


class PoseRangeError(AlfaError, ValueError):
    pass


class SliceIndexError(AlfaError, IndexError):
    pass


class ConfigError(AlfaError, ValueError):
    """Bad configuration; ``key`` names the offending key when there is one."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class FormatError(AlfaError, ValueError):
    """A weight file is truncated, mislabelled or otherwise corrupt."""
