"""Exception hierarchy shared by every kwslab module."""


class KwsError(Exception):
    """Base class for all kwslab errors."""


class DimensionError(KwsError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class ConfigError(KwsError, ValueError):
    """Invalid configuration value or infeasible geometry."""


class NumericError(KwsError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(KwsError, ValueError):
    """A documented precondition was violated by the caller."""


class DataError(KwsError, IOError):
    """Missing, unreadable, or malformed input data."""


class CorruptionError(DataError):
    """Stored data failed its checksum."""

    def __init__(self, example_id, message=None):
        self.example_id = example_id
        super().__init__(message or f"checksum mismatch for example {example_id!r}")


class DegenerateMaskError(ContractError):
    """Masking removed every row of a posterior track."""


class InfeasibleError(ContractError):
    """No operating point satisfies the requested target."""

    def __init__(self, target, minimum):
        self.target = target
        self.minimum = minimum
        super().__init__(
            f"no threshold reaches FRR <= {target:g}; minimum achievable FRR is {minimum:g}"
        )


class EmptyInputError(ContractError):
    """Input is shorter than the minimum processable length."""


class ResampleRequiredError(ContractError):
    """Audio sample rate differs from the frontend's rate."""


class UnsupportedFormatError(DataError):
    """File is valid but uses a feature this reader does not handle."""


class ParseError(DataError):
    """Malformed binary header."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class UtteranceTooShortError(ContractError):
    """Feature matrix has fewer frames than one model window."""
