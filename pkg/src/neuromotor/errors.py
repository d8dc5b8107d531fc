"""Exception hierarchy shared by every analysis stage."""


class NeuromotorError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(NeuromotorError):
    """Invalid run configuration or settings file."""


class IngestError(NeuromotorError):
    """A dataset file could not be read or violates the canonical layout."""


class ManifestError(IngestError):
    """Missing, malformed or inconsistent dataset manifest."""


class SchemaError(IngestError):
    """A series breaks a core-model invariant (channels, ordering, finiteness)."""


class SignalError(NeuromotorError):
    """A preprocessing precondition does not hold."""


class AlignmentError(NeuromotorError):
    """Game and sensor timelines could not be matched."""


class ExcludedTaskError(NeuromotorError):
    """The task is outside the scope of the requested analysis."""


class AnalysisError(NeuromotorError):
    """An analysis stage cannot produce a result for its input."""
