"""Exception and warning types shared across the toolkit."""


class PSMError(Exception):
    """Base class for all toolkit errors."""


class StructureError(PSMError):
    """Malformed or inconsistent program structure."""


class TraceError(PSMError):
    """Malformed trace file or out-of-order event stream."""


class DatasetError(PSMError):
    pass


class FlowError(PSMError):
    """Shape mismatch, non-finite values, or divergence in a flow."""


class DivergenceError(FlowError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class NetworkError(PSMError):
    """Invalid network topology or an inference query it cannot answer."""


class ConditionTooTightError(NetworkError):
    pass


class PersistenceError(NetworkError):
    pass


class DigestMismatchError(PersistenceError):
    pass


class StructureWarning(UserWarning):
    pass


class TraceWarning(UserWarning):
    pass


class DatasetWarning(UserWarning):
    pass


class InferenceWarning(UserWarning):
    pass


class PipelineError(PSMError):
    """A pipeline step failed; ``phase`` names the step and ``__cause__`` holds the original error."""

    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {cause}")
