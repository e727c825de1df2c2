"""Exception types shared across the pipeline, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class PrerequisiteError(RuntimeError):
    """A required upstream artifact is missing or stale (exit code 3)."""


class AlignmentError(ValueError):
    """Inputs do not share the same grid/links."""


class SplitError(ValueError):
    """Chronological split cannot be formed."""


class CheckpointMissingError(PrerequisiteError):
    """A forecast was requested from an untrained expert."""
