"""Exception types shared across the package.

Each family maps onto a CLI exit code (see :mod:`snncl.cli`).
"""


class SnnclError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ContractError(SnnclError, ValueError):
    """A precondition on shapes, indices or configuration was violated."""

    exit_code = 2


class InjectionError(ContractError):
    """Activations injected mid-network do not fit the receiving layer."""


class ConfigError(ContractError):
    """Invalid run configuration."""


class NumericError(SnnclError, ArithmeticError):
    """Non-finite values reached the simulator or the optimizer."""

    exit_code = 4


class DataError(SnnclError):
    """Malformed dataset, event file or stored artifact."""

    exit_code = 3


class EventFormatError(DataError):
    """EVT1 parse failure. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CodecError(DataError):
    """Unknown codec or invalid codec parameters."""


class DecodeError(CodecError):
    """Corrupt latent payload or header."""


class CodecWarning(UserWarning):
    """Lossy event during compression, e.g. a clamped chunk count."""
