"""
Exception hierarchy shared by the back-end modules.

The command-line entry script maps these onto exit codes:
ConfigError -> 1, DataError (and subclasses) -> 2, NumericError -> 3.
"""


class BackendError(Exception):
    """Root of every error raised by the back-end."""


class ConfigError(BackendError, ValueError):
    """A configuration value or parameter is outside its allowed range."""


class DataError(BackendError, ValueError):
    """Input data is malformed, inconsistent or insufficient."""


class ParseError(DataError):
    """A file violates its format. `location` is a line number or record index."""

    def __init__(self, message, path=None, location=None):
        self.path = path
        self.location = location
        where = []
        if path is not None:
            where.append(str(path))
        if location is not None:
            where.append(str(location))
        prefix = f"{':'.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class ShapeError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptyInputError(InsufficientDataError):
    pass


class DegenerateVectorError(DataError):
    def __init__(self, utt_id):
        self.utt_id = utt_id
        super().__init__(f"Vector '{utt_id}' has zero norm after centering")


class JoinError(DataError):
    """Trials without scores. Only the first 10 offenders are listed."""

    def __init__(self, missing, total_missing=None):
        self.missing = list(missing)[:10]
        self.total_missing = total_missing if total_missing is not None else len(missing)
        shown = ", ".join(f"{m} {t}" for m, t in self.missing)
        super().__init__(f"{self.total_missing} trial(s) have no score, e.g.: {shown}")


class InfeasiblePlanError(DataError):
    def __init__(self, cell, quota, available):
        self.cell = cell
        self.quota = quota
        self.available = available
        super().__init__(
            f"Cell {cell} needs {quota} utterances but only {available} are available"
        )


class DomainError(DataError):
    pass


class NumericError(BackendError, ArithmeticError):
    pass


class SingularityError(NumericError):
    """An eigenvalue at or below the floor blocks an inverse or fractional power."""

    def __init__(self, eigenvalue, floor, what="matrix"):
        self.eigenvalue = float(eigenvalue)
        self.floor = float(floor)
        super().__init__(
            f"{what} is singular: eigenvalue {self.eigenvalue:.3e} <= floor {self.floor:.1e}"
        )
