"""Exception hierarchy shared across kbforge modules."""

from __future__ import annotations


class KBForgeError(Exception):
    """Base class for all kbforge errors."""


class ConfigError(KBForgeError):
    """Invalid or inconsistent run configuration."""


# --- knowledge base model ---------------------------------------------------


class TargetMissing(KBForgeError):
    """An edit op names a chunk or document that does not exist."""


class NameCollision(KBForgeError):
    """An add op would duplicate an existing chunk or document name."""


class IdMismatch(KBForgeError):
    """Two documents expected to share an id do not."""


class DuplicateDocId(KBForgeError):
    """Two diffs (or trajectories) target the same document."""


# --- llm gateway ------------------------------------------------------------


class ProviderError(KBForgeError):
    """Chat/embedding provider failed after bounded retries."""


class EmbeddingProviderError(ProviderError):
    """Embedding failure, annotated with the chunk that triggered it."""


class ReplayMiss(KBForgeError):
    """Replay transcript has no record for a request hash."""


class ContextOverflow(KBForgeError):
    """Prompt exceeds the provider context limit; budgets are misconfigured."""


class InputTooLong(KBForgeError):
    """Embedding input exceeds the provider input limit."""


class MissingVariable(KBForgeError):
    """Template rendering found an unbound placeholder."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound template placeholder: {{{name}}}")


# --- critic / actor ---------------------------------------------------------


class ReplyParseError(KBForgeError):
    """LLM reply did not match the expected output format after retries."""


class FeedbackMissing(KBForgeError):
    """Reflection requested for a failing example that carries no feedback."""


class NoChildren(KBForgeError):
    """UCT selection called on a node without children."""
