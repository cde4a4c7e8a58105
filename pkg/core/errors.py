class PipelineError(Exception):
    pass


class IngestionError(PipelineError):
    pass


class EmptyCorpusError(PipelineError):
    pass


class InsufficientDataError(PipelineError):
    pass


class ConfigurationError(PipelineError):
    pass


class UsageError(PipelineError):
    pass


class DecodeError(PipelineError):
    pass


class StructuralError(PipelineError):
    pass


class InputError(PipelineError):
    pass


class CheckpointError(PipelineError):
    pass


class ScheduleError(PipelineError):
    pass


class NoMaskedPositions(PipelineError):
    "Raised when a batch has nothing to predict, the step should be skipped"


class NonFiniteLossError(PipelineError):
    pass


class DatasetParseError(PipelineError):
    pass


class UnknownLabelError(PipelineError):
    pass


class GridError(PipelineError):
    pass


class MetricError(PipelineError):
    pass


class TruncationError(PipelineError):
    pass
