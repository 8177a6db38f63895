"""
Error hierarchy for the query pipeline.

UserInputError and its subclasses describe mistakes the caller can fix
(bad arguments, bad configuration, malformed input files); the CLI maps
them to exit code 1.
Everything else derived from PipelineError is a domain failure.
"""
from typing import Dict, List, Optional, Sequence, Tuple


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class UserInputError(PipelineError):
    """Error caused by invalid user input or configuration."""


class PreconditionError(UserInputError, ValueError):
    """An operation was called with arguments violating its precondition."""


class InvalidDateRangeError(UserInputError, ValueError):
    """min_date is later than max_date."""


class ConfigError(UserInputError):
    """Run configuration failed validation."""

    def __init__(self, message: str, key: Optional[str] = None,
                 position: Optional[Tuple[int, int]] = None):
        self.key = key
        self.position = position
        where = ""
        if key:
            where = f" [key '{key}'"
            if position:
                where += f" at line {position[0]}, column {position[1]}"
            where += "]"
        super().__init__(f"{message}{where}")


class NoContentTermsError(UserInputError, ValueError):
    """Every token of a query was a stopword."""


class ExpressionSyntaxError(UserInputError, ValueError):
    """A Boolean expression string could not be parsed."""


class DimensionMismatchError(UserInputError, ValueError):
    """A vector does not match the dimension of an index or embedder."""


class InputFormatError(UserInputError):
    """A file supplied by the caller is malformed (XML, index, embeddings)."""


class CorpusParseError(InputFormatError):
    """Malformed NCBI XML."""

    def __init__(self, message: str, byte_offset: Optional[int] = None):
        self.byte_offset = byte_offset
        suffix = f" (byte offset {byte_offset})" if byte_offset is not None else ""
        super().__init__(f"{message}{suffix}")


class UnretrievableDocumentError(PipelineError):
    """A document has neither a PMCID nor an abstract."""


class TransportError(PipelineError):
    """An HTTP request failed after all retry attempts."""

    def __init__(self, message: str, attempts: int = 1, status: Optional[int] = None):
        self.attempts = attempts
        self.status = status
        super().__init__(f"{message} (attempts={attempts})")


class FixtureMissingError(TransportError):
    """No recorded fixture matches a replayed request."""


class QueryError(PipelineError):
    """The E-Utilities server reported an error for a query."""

    def __init__(self, server_message: str):
        self.server_message = server_message
        super().__init__(f"E-Utilities query error: {server_message}")


class PartialFetchError(PipelineError):
    """Some efetch batches failed; the rest are kept in ``partial``."""

    def __init__(self, failed_batches: Sequence[Tuple[int, List[str], Exception]],
                 partial: bytes):
        self.failed_batches = list(failed_batches)
        self.partial = partial
        indices = ", ".join(str(index) for index, _, _ in self.failed_batches)
        super().__init__(f"efetch failed for batch(es) {indices}")


class LadderExecutionError(PipelineError):
    """Every level of a query ladder failed at the transport."""

    def __init__(self, errors: Dict[int, Exception]):
        self.errors = dict(errors)
        details = "; ".join(f"level {level}: {error}" for level, error in sorted(self.errors.items()))
        super().__init__(f"all ladder levels failed: {details}")


class IndexFormatError(InputFormatError):
    """Serialized vector index is invalid."""


class BadMagicError(IndexFormatError):
    """Index payload does not start with the expected magic bytes."""


class IndexHeaderError(IndexFormatError):
    """Index header disagrees with the payload (dimension or count mismatch)."""


class TruncatedPayloadError(IndexFormatError):
    """Index payload ended before the declared content."""


class EmbeddingError(PipelineError):
    """Embeddings are unusable (non-finite values, zero rows, bad service reply)."""


class EmbeddingFileError(EmbeddingError, InputFormatError):
    """A precomputed embeddings file or its ids file is unusable."""


class NothingToSegmentError(PipelineError):
    """Gap series needs at least two sentences."""


class GenerationError(PipelineError):
    """The generation client could not produce a response."""
