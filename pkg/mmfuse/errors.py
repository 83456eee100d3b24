"""
Errors - one hierarchy for library and CLI failures
"""


class MmfuseError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""

    exit_code = 1


class DimensionError(MmfuseError):
    exit_code = 2


class ConfigurationError(MmfuseError):
    exit_code = 2


class ContractError(MmfuseError):
    exit_code = 1


class DataError(MmfuseError):
    exit_code = 1


class NonFiniteError(MmfuseError):
    exit_code = 3


class NonFiniteLossError(NonFiniteError):
    """Raised by the trainer when the loss of a step is NaN or infinite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
