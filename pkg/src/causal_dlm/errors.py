"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A configuration object violates its invariants."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class PositionRangeError(ContractError):
    """A logical position id falls outside the model's supported range."""


class NumericError(ArithmeticError):
    """Non-finite values reached a numeric routine."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed, truncated, or of an unknown version."""


class EncodingError(ValueError):
    """Text contains a character the tokenizer cannot map."""


class DecodingError(ValueError):
    """A token id has no character in the tokenizer's alphabet."""
