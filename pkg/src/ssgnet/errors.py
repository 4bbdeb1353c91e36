"""Exception types shared across the package."""


class SsgnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SsgnetError):
    """A spec, config value, or requested operation is invalid."""


class ContractError(SsgnetError):
    """A caller violated an API precondition (shape mismatch, id collision, ...)."""


class DatasetLoadError(ConfigError):
    """A dataset directory or manifest is corrupt or incomplete."""


class TrainingDiverged(SsgnetError):
    """Training produced a non-finite loss and was aborted."""


class StageError(SsgnetError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
