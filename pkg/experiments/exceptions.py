# experiments/exceptions.py

from networks.exceptions import LyapforgeError


class ConfigError(LyapforgeError):
    """
    An experiment configuration failed validation
    """

    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class MissingKeyError(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class SamplerRejectionError(ConfigError):
    """
    The cutoff ball swallows almost all of the sampling box
    """


class CheckpointError(LyapforgeError):
    """
    A checkpoint file could not be read back
    """


class CheckpointParseError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    pass


class TrainingAborted(LyapforgeError):
    """
    A numeric fault stopped a training loop
    """

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"training aborted at step {step}: {cause}")
