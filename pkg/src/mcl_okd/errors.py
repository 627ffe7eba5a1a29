"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class NoNegativesError(InvalidInputError):
    """No memory-bank slot carries a label different from the anchor's."""


class NonFiniteLossError(FloatingPointError):
    """A training step produced a NaN or infinite loss.

    ``components`` maps each loss term to its value at the failing step.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class CheckpointIntegrityError(IOError):
    """A checkpoint file is truncated, corrupted or not a checkpoint at all."""


class IncompatibleCheckpointError(ValueError):
    """A checkpoint was written for a different model/data configuration."""


class DatasetNotFoundError(FileNotFoundError):
    """Dataset files are missing from the configured root."""


class ConfigError(ValueError):
    """A configuration field is missing, unknown or has an invalid value.

    ``field`` names the offending key.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
