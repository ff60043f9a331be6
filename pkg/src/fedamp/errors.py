"""Exception hierarchy shared by every module."""


class FedAMPError(Exception):
    """Base class for all library errors."""


class InvalidInputError(FedAMPError, ValueError):
    pass


class DimensionError(FedAMPError, ValueError):
    pass


class DomainError(FedAMPError, ValueError):
    pass


class DegenerateInputError(FedAMPError, ValueError):
    pass


class UnsupportedOperationError(FedAMPError, TypeError):
    pass


class StepSizeTooLargeError(FedAMPError, ValueError):
    """A strict-mode collaboration row ended up with a negative self weight."""

    def __init__(self, row: int, self_weight: float):
        self.row = row
        self.self_weight = self_weight
        super().__init__(
            f"step size too large: self weight of row {row} is {self_weight:.6g} < 0"
        )


class NumericalDivergenceError(FedAMPError, ArithmeticError):
    def __init__(self, message: str, client: int | None = None, round: int | None = None):
        self.client = client
        self.round = round
        where = []
        if client is not None:
            where.append(f"client {client}")
        if round is not None:
            where.append(f"round {round}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InsufficientDataError(FedAMPError, ValueError):
    pass


class ConfigError(FedAMPError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class FormatError(FedAMPError, ValueError):
    pass
