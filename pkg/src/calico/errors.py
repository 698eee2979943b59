"""Exception types shared across the package."""


class CalicoError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CalicoError, ValueError):
    pass


class ConfigurationError(CalicoError, ValueError):
    pass


class NonFiniteError(CalicoError, FloatingPointError):
    """An op produced NaN or Inf. Carries the op name."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class GradCheckError(CalicoError):
    pass


class PromptError(CalicoError, ValueError):
    pass


class AssemblyError(CalicoError, ValueError):
    pass


class GroundingParseError(CalicoError, ValueError):
    pass


class ImageRangeError(GroundingParseError):
    pass


class BindingError(CalicoError, ValueError):
    pass


class LossError(CalicoError, ValueError):
    pass


class TrainingDataError(CalicoError, ValueError):
    pass


class StepError(CalicoError):
    pass


class TrainingDiverged(CalicoError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


class MetricError(CalicoError, ValueError):
    pass


class EmbeddingError(CalicoError, ValueError):
    pass


class CodecError(CalicoError, ValueError):
    pass


class AnnotationParseError(CalicoError, ValueError):
    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)


class MappingError(CalicoError, ValueError):
    pass


class CurationError(CalicoError, ValueError):
    pass
