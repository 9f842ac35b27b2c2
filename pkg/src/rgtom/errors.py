"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``rgtom.cli``).
"""


class ConfigError(ValueError):
    """Invalid configuration or dimension mismatch."""


class StateError(RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class TrainingError(RuntimeError):
    """Training diverged or otherwise could not continue."""


class StaleArtifactError(RuntimeError):
    """A persisted artifact does not match the data it claims to describe."""


class SamplingError(RuntimeError):
    """A game could not be sampled with the requested constraints."""
