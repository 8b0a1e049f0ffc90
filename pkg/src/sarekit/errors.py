"""Exception types shared across the toolkit."""


class SarekitError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(SarekitError, ValueError):
    """An argument is outside its documented domain; message names the field."""


class ShapeError(SarekitError, ValueError):
    """Array arguments have incompatible shapes."""


class SingularityError(SarekitError, ArithmeticError):
    """A schedule value makes the requested operation undefined."""


class BackendError(SarekitError, RuntimeError):
    """A pluggable backend (codec, denoiser, captioner, encoder) failed.

    Carries enough context to locate the failure in a batch run.
    """

    def __init__(self, message: str, *, stage: str = "", step_index: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.step_index = step_index


class CaptioningError(BackendError):
    """Captioner backend failure; carries backend id and image digest."""

    def __init__(self, message: str, *, backend_id: str = "", image_digest: str = ""):
        super().__init__(message, stage="caption")
        self.backend_id = backend_id
        self.image_digest = image_digest


class IngestError(SarekitError):
    """A dataset tree does not match the expected layout."""


class EmptySelectionError(SarekitError):
    """A manifest filter matched nothing (guards against silent empty training)."""


class UndefinedMetricError(SarekitError):
    """A metric is undefined for the given inputs (e.g. AUC with one class)."""


class TrainingError(SarekitError):
    """Training cannot proceed (bad dataset, non-finite loss)."""


class CacheMissError(SarekitError):
    """Offline evaluation hit keys that are not in the reconstruction cache."""

    def __init__(self, message: str, missing_keys: list[str]):
        super().__init__(message)
        self.missing_keys = missing_keys
