"""Exception hierarchy shared by every module."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class TrainingDivergenceError(RuntimeError):
    """A loss became non-finite during optimisation."""

    def __init__(self, message, epoch=None, step=None):
        if epoch is not None:
            message = f"{message} (epoch={epoch}, step={step})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class InvalidSpecError(ValueError):
    """A synthetic-data spec cannot be realised."""


class ConfigError(ValueError):
    """A run configuration failed validation; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class DatasetParseError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetVersionError(ValueError):
    def __init__(self, found, supported):
        super().__init__(
            f"dataset format version {found} is not supported "
            f"(this reader supports version {supported})"
        )
        self.found = found
        self.supported = supported


class CheckpointError(ValueError):
    """Checkpoint is unreadable or incompatible with the data it is used on."""
