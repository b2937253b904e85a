"""
Error vocabulary shared by all talkfast modules.
"""
from typing import Optional


class ValidationError(ValueError):
    """An input value violates the documented range or precondition."""


class ContractError(ValueError):
    """Two components disagree on a shape or width they must share."""


class ConfigError(ValidationError):
    """A `RunConfig` failed schema or cross-field validation."""


class CheckpointMismatchError(ConfigError):
    """Checkpoint metadata disagrees with the run configuration."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or Inf loss.

    Args:
        message (str): Diagnostic message.
        dump_path (Optional[str]): Where the offending batch was saved, if anywhere.
    """

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path
