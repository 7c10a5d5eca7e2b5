"""Exception hierarchy for the adaptive MRAG engine."""

from typing import Optional


class MragError(Exception):
    """Base error; ``stage`` names the pipeline stage that failed."""

    stage = "general"

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class ConfigError(MragError, ValueError):
    stage = "config"


class RecordFormatError(MragError, ValueError):
    """A malformed line in a line-delimited input file."""

    stage = "input"

    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        location = f"{path}:{line_no}: " if path is not None and line_no is not None else ""
        super().__init__(f"{location}{message}")
        self.path = path
        self.line_no = line_no


class KnowledgeBaseError(MragError, ValueError):
    stage = "kb"


class EmbeddingError(MragError):
    stage = "embed"


class RemoteServiceError(MragError):
    """Non-success response or transport failure from a remote endpoint."""

    stage = "remote"

    def __init__(self, message: str, status: Optional[int] = None,
                 body_excerpt: str = "", stage: Optional[str] = None):
        detail = message
        if status is not None:
            detail = f"{message} (status={status}, body={body_excerpt!r})"
        super().__init__(detail, stage=stage)
        self.status = status
        self.body_excerpt = body_excerpt

    @property
    def transient(self) -> bool:
        return self.status is None or self.status == 429 or self.status >= 500


class RetrievalError(MragError, ValueError):
    stage = "retrieve"


class DimensionMismatchError(RetrievalError):
    pass


class IndexFormatError(MragError, ValueError):
    stage = "index"


class RouterError(MragError, ValueError):
    stage = "route"


class GenerationError(MragError):
    stage = "generate"


class MetricError(MragError, ValueError):
    stage = "evaluate"


class CurationError(MragError):
    stage = "curate"


class NoiseSetError(CurationError, ValueError):
    stage = "noise"


class PipelineStageError(MragError):
    """Wraps a failure inside :meth:`MragPipeline.answer` with its stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}", stage=stage)
        self.cause = cause
