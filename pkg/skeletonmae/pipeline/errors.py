"""
Typed errors shared by every pipeline stage.
Each error family maps to a process exit code used by the command-line entry point.
"""

from typing import Optional, Sequence


class SkeletonMAEError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class ConfigError(SkeletonMAEError):
    """Invalid configuration, layout, or model structure"""

    exit_code = 2


class DataError(SkeletonMAEError):
    """Unreadable or invalid input data"""

    exit_code = 3


class NumericError(SkeletonMAEError):
    """Numerical failure inside the tensor engine or a training loop"""

    exit_code = 4


# Configuration family

class LayoutError(ConfigError):
    pass


class AdjacencyError(ConfigError):
    pass


class MaskError(ConfigError):
    pass


class LayerConfigError(ConfigError):
    pass


class CheckpointMismatchError(ConfigError):
    """A checkpoint tensor does not fit the model it is loaded into"""

    def __init__(self, name: str, expected: Optional[Sequence[int]] = None,
                 found: Optional[Sequence[int]] = None, reason: Optional[str] = None):
        self.name = name
        if reason is None:
            reason = f"expected shape {list(expected or [])}, checkpoint has {list(found or [])}"
        super().__init__(f"Checkpoint tensor '{name}' mismatch: {reason}")


# Data family

class DatasetFormatError(DataError):
    """A dataset file that cannot be parsed"""

    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class SequenceValidationError(DataError):
    """A skeleton sequence violating its invariants"""

    def __init__(self, message: str, person: Optional[int] = None,
                 frame: Optional[int] = None, joint: Optional[int] = None):
        self.person = person
        self.frame = frame
        self.joint = joint
        location = [
            f"{key} {value}"
            for key, value in (("person", person), ("frame", frame), ("joint", joint))
            if value is not None
        ]
        if location:
            message = f"{message} (at {', '.join(location)})"
        super().__init__(message)


class DegeneratePoseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class LabelError(DataError):
    pass


class CheckpointFormatError(DataError):
    pass


class OutputWriteError(DataError):
    """A report, table or export that cannot be written"""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"Cannot write {self.path}: {reason}")


# Numeric family

class ShapeMismatchError(NumericError):
    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {list(self.left)} and {list(self.right)}")


class NonFiniteError(NumericError):
    pass


class NonFiniteLossError(NonFiniteError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"Non-finite loss {value} at step {step}")


class NonScalarLossError(NumericError):
    pass


class DegenerateCosineError(NumericError):
    pass


class SingularEmbeddingError(NumericError):
    pass


class PrecisionError(NumericError):
    pass
