"""Exception hierarchy. Each error carries a short category used by the CLI."""


class SpartaError(Exception):
    category = "internal"


class ConfigError(SpartaError, ValueError):
    category = "config"


class DataError(SpartaError, ValueError):
    category = "data"


class DegenerateChannelError(DataError):
    pass


class SamplerError(SpartaError, ValueError):
    category = "sampler"


class ContractError(SpartaError, ValueError):
    """A caller broke a documented precondition (shape, normalization, freeze)."""

    category = "contract"


class InvariantViolation(SpartaError, RuntimeError):
    category = "invariant"


class MetricError(SpartaError, ValueError):
    category = "metric"


class TrainingDiverged(SpartaError, RuntimeError):
    category = "diverged"

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
