"""Exception types shared across the package."""


class ResMLPError(Exception):
    pass


class DimensionError(ResMLPError, ValueError):
    pass


class RankError(ResMLPError, ValueError):
    pass


class ConfigurationError(ResMLPError, ValueError):
    pass


class ContractError(ResMLPError, ValueError):
    pass


class DataError(ResMLPError, ValueError):
    pass


class CapacityError(ResMLPError, ValueError):
    pass


class InvariantError(ResMLPError, RuntimeError):
    pass


class NonFiniteError(ResMLPError, FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class CorruptCheckpointError(ResMLPError, ValueError):
    def __init__(self, check: str, detail: str = ""):
        self.check = check
        msg = f"corrupt checkpoint: {check} check failed"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigParseError(ResMLPError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
