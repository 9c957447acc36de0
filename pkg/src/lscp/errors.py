"""Exception types shared across the pipeline."""


class LscpError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LscpError):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


class StageError(LscpError):
    """A pipeline stage failed mid-run (CLI exit code 2)."""


class CapabilityError(LscpError):
    """The selected backend lacks a capability the operation needs (CLI exit code 3)."""


class BackendError(LscpError):
    """A model backend call failed."""


class RetryableBackendError(BackendError):
    """Transient backend failure (transport, rate limit); safe to retry."""


class ChainGenerationError(LscpError):
    """Chain generation produced no parsable question-answer pairs."""
