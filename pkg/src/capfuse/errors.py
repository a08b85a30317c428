"""Exception hierarchy.

Four top-level families map onto CLI exit codes: ConfigError (2),
DataError (3), ProviderError (4), and NumericError plus anything
unclassified (5, internal invariant failure).
"""


class CapfuseError(Exception):
    """Base class for all package errors."""


class ConfigError(CapfuseError):
    """Bad or missing configuration."""


class EmptySlot(ConfigError):
    """A required template slot (class name, domain, ...) is empty."""


class DataError(CapfuseError):
    """Input data is missing, malformed, or inconsistent."""


class BadMagic(DataError):
    """File is not a recognized store manifest (wrong version/dtype)."""


class CorruptManifest(DataError):
    """Manifest is internally inconsistent."""


class TruncatedBlob(DataError):
    """Embedding blob size disagrees with the manifest row count."""


class MissingEmbedding(DataError):
    """A referenced embedding row is absent from the store."""


class NoCaptions(DataError):
    """A sample has no captions to pick from."""


class EmptyClassCaptions(DataError):
    """A class has no captions, so no prototype can be built."""


class EmptySplit(DataError):
    """Requested evaluation split contains no samples."""


class VocabLoadError(DataError):
    """Tokenizer vocab/merges file is missing or malformed."""


class ProviderError(CapfuseError):
    """MLLM provider call failed after retries."""


class AuthMissing(ProviderError):
    """API key env var unset while uncached requests remain."""


class Reject(CapfuseError):
    """Provider answer did not match any class name."""

    def __init__(self, answer: str):
        super().__init__(f"answer not in class list: {answer!r}")
        self.answer = answer


class NumericError(CapfuseError):
    """Numerical precondition violated."""


class ZeroNorm(NumericError):
    """Vector norm below the zero guard, cannot normalize."""


class DimMismatch(NumericError):
    """Operands disagree on embedding dimension."""


class DegenerateMean(NumericError):
    """Mean of unit vectors cancelled to (near) zero."""


class ShapeMismatch(NumericError):
    """Parameter/gradient shapes disagree."""
