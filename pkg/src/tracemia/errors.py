"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TraceMIAError(Exception):
    """Base class for all errors raised by this package."""


# dataset
class EmptyDocument(TraceMIAError):
    pass


class ParseError(TraceMIAError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(TraceMIAError):
    def __init__(self, line: int, seq_id: str):
        super().__init__(f"line {line}: duplicate id {seq_id!r}")
        self.line = line
        self.seq_id = seq_id


# providers
class TemplateError(TraceMIAError):
    pass


class ProviderError(TraceMIAError):
    """Any failure obtaining a completion from a provider."""

    sample_index: int | None = None


class MissingTraceField(ProviderError):
    def __init__(self, path: str):
        super().__init__(f"response has no field at {path!r}")
        self.path = path


class ApiError(ProviderError):
    def __init__(self, status: int | None, message: str = ""):
        super().__init__(f"API error (status={status}) {message}".strip())
        self.status = status


class RateLimited(ApiError):
    def __init__(self, message: str = ""):
        super().__init__(429, message)


class OfflineError(ProviderError):
    """Raised when a network request is needed but the run is offline."""


# embedding / vector math
class EncoderError(TraceMIAError):
    pass


class EmptyText(TraceMIAError):
    pass


class DimensionMismatch(TraceMIAError):
    pass


class ZeroNorm(TraceMIAError):
    pass


# anchors / attack
class InvalidDistribution(TraceMIAError):
    pass


class GammaTooLarge(TraceMIAError):
    pass


class EmptyInput(TraceMIAError):
    pass


class DegenerateAxis(TraceMIAError):
    pass


class EncoderAxisMismatch(TraceMIAError):
    pass


# baselines
class ScorerError(TraceMIAError):
    pass


class InsufficientTraces(TraceMIAError):
    pass


class UnparseableJudgement(TraceMIAError):
    pass


# evaluation
class DegenerateLabels(TraceMIAError):
    pass


class InsufficientSamples(TraceMIAError):
    pass


class ZeroVariance(TraceMIAError):
    pass


class MixedLabelsWithinDocument(TraceMIAError):
    pass


class InsufficientVectors(TraceMIAError):
    pass


# pipeline
class ConfigError(TraceMIAError):
    pass


class MissingReports(TraceMIAError):
    pass
