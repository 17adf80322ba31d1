class RATDError(Exception):
    exit_code = 1


class ConfigError(RATDError, ValueError):
    exit_code = 2


class MissingArtifactError(RATDError, FileNotFoundError):
    exit_code = 3


class NumericalError(RATDError, FloatingPointError):
    exit_code = 4


class FingerprintMismatch(RATDError):
    exit_code = 3


class FrozenModelError(RATDError, RuntimeError):
    pass
