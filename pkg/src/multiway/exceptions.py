"""Exception types raised by the estimation code.

All numerical failures derive from :class:`NumericalError` so the command line
front end can map them to a single exit status.
"""


class MultiwayError(Exception):
    pass


class NumericalError(MultiwayError):
    pass


class NotPositiveDefiniteError(NumericalError):
    """A covariance factor failed its Cholesky factorization."""

    def __init__(self, message: str, dimension: int | None = None):
        super().__init__(message)
        self.dimension = dimension


class ConditioningError(NumericalError):
    """The observed block ``R Λ R'`` of one observation is numerically singular."""

    def __init__(self, message: str, observation: int | None = None):
        super().__init__(message)
        self.observation = observation


class RankDeficiencyError(NumericalError):
    def __init__(self, message: str, dimension: int | None = None):
        super().__init__(message)
        self.dimension = dimension


class DomainError(NumericalError):
    pass


class SizeLimitError(MultiwayError):
    pass


class DataError(MultiwayError):
    """Malformed input data; ``row`` is the 1-based line number when known."""

    def __init__(self, message: str, row: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"line {row}")
        if where:
            message = f"{':'.join(where)}: {message}"
        super().__init__(message)
        self.row = row
        self.path = path


class ConfigError(MultiwayError):
    pass
