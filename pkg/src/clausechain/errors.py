"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so new errors should
subclass the closest family rather than ``ClauseChainError`` directly.
"""


class ClauseChainError(Exception):
    """Base class for all package errors."""


class ConfigError(ClauseChainError):
    """Bad configuration, unknown template, or unusable option combination."""


class ValidationError(ClauseChainError):
    """Input data violates a schema invariant."""


class ParseError(ValidationError):
    """A bank, dataset, or trace file could not be read as its format."""


class TemplateError(ConfigError):
    """Base for template lookup and rendering failures."""


class TemplateNotFoundError(TemplateError):
    pass


class MissingBindingError(TemplateError):
    def __init__(self, slot: str):
        super().__init__(f"no binding supplied for slot {slot!r}")
        self.slot = slot


class UnknownSlotError(TemplateError):
    def __init__(self, slot: str, source: str = "<template>"):
        super().__init__(f"{source}: unknown slot marker {slot!r}")
        self.slot = slot


class ProviderError(ClauseChainError):
    """Base for completion-backend failures."""

    retryable = False


class NetworkError(ProviderError):
    retryable = True


class RateLimitError(ProviderError):
    retryable = True

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class AuthenticationError(ProviderError):
    pass


class MalformedResponseError(ProviderError):
    pass


class UnmatchedPromptError(ProviderError):
    """A scripted provider had no rule for the prompt and no default."""


class CacheMissError(ProviderError):
    """Replay mode was asked for a completion that is not cached."""


class ChainError(ClauseChainError):
    """A chain could not be completed for one item (e.g. truncated stage 1)."""


class MetricsError(ClauseChainError):
    """Scoring inputs are inconsistent (missing gold, empty artifact, ...)."""


class FileAccessError(ClauseChainError, OSError):
    """An input or output file could not be read or written."""
