"""Exception taxonomy shared by all modules."""


class HcscError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(HcscError):
    """Invalid user-supplied configuration (bad sizes, rates, toggles)."""


class ContractError(HcscError):
    """A caller violated an internal API precondition."""


class FormatError(HcscError):
    """Malformed serialized data. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(HcscError):
    """Non-finite values appeared where finite numbers are required."""
