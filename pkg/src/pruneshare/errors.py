"""Exception types shared across the package."""


class UsageError(ValueError):
    """An operation was called with arguments that violate its contract
    (wrong shapes, unknown agent ids, missing caches)."""


class ConfigError(ValueError):
    """An experiment configuration or schedule string failed validation.

    Maps to CLI exit code 2. The message names the offending field/token.
    """


class TrainingError(RuntimeError):
    """A run hit a numeric failure (non-finite gradients or losses).

    Maps to CLI exit code 3; partial results are flushed before raising.
    """
