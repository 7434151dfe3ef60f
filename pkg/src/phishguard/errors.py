"""Exception taxonomy shared across the engine.

Every error raised by phishguard derives from PhishGuardError so callers
can catch the whole family at pipeline boundaries.
"""


class PhishGuardError(Exception):
    """Base class for all phishguard errors."""


# --- email parsing / preprocessing -----------------------------------------

class MissingSender(PhishGuardError):
    """Message carries no From header."""


class NoAtSign(PhishGuardError):
    """Sender string does not contain '@'."""


# --- embeddings -------------------------------------------------------------

class ProviderUnavailable(PhishGuardError):
    """Remote embedding provider unreachable after retries."""

    def __init__(self, message, attempts=1):
        super().__init__(message)
        self.attempts = attempts


class DimensionMismatch(PhishGuardError):
    """Vector dimension differs from the configured dimension."""


class ZeroVector(PhishGuardError):
    """Operation undefined on the (near-)zero vector."""


# --- vector index -----------------------------------------------------------

class DuplicateId(PhishGuardError):
    """Entry id already present in the index."""


class NotNormalized(PhishGuardError):
    """Vector is not unit-normalized within tolerance."""


class FormatVersionMismatch(PhishGuardError):
    """Index file magic/version/dimension does not match this engine."""


class CorruptFile(PhishGuardError):
    """Index file truncated or checksum failed."""


# --- threat intelligence ----------------------------------------------------

class RateLimited(PhishGuardError):
    """Reputation service returned 429; retry_after carries the wait in seconds."""

    def __init__(self, message, retry_after=None):
        super().__init__(message)
        self.retry_after = retry_after


class NetworkError(PhishGuardError):
    """Reputation service unreachable or returned a server error."""


# --- prompt construction / verdict parsing ----------------------------------

class BudgetTooSmall(PhishGuardError):
    """Fixed prompt blocks alone exceed the character budget."""


class NoJsonFound(PhishGuardError):
    """Model output contains no parseable JSON object."""

    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw


class SchemaViolation(PhishGuardError):
    """Parsed JSON violates the verdict schema; names the offending field."""

    def __init__(self, field, reason, raw=""):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
        self.raw = raw


# --- LLM gateway ------------------------------------------------------------

class UnknownModel(PhishGuardError):
    """Model key absent from the registry."""


class AuthFailed(PhishGuardError):
    """Endpoint rejected credentials (401/403); never retried."""


class Exhausted(PhishGuardError):
    """Transient-failure retries spent without a successful completion."""


class ContextOverflow(PhishGuardError):
    """Request exceeds the model context window (character-budget estimate)."""


class NoDefaultRule(PhishGuardError):
    """Scripted backend rule table lacks a catch-all default rule."""


# --- pipeline / evaluation ---------------------------------------------------

class EmbeddingFailed(PhishGuardError):
    """Query embedding could not be produced."""


class LlmExhausted(PhishGuardError):
    """LLM stage failed and the fail-closed fallback is disabled."""


class DegenerateCorpus(PhishGuardError):
    """A label class has zero members; stratified split impossible."""
