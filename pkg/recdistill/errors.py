"""Exception hierarchy shared by every pipeline stage.

Each error class carries the process exit code the CLI reports for it.
"""


class RecDistillError(Exception):
    exit_code = 1


class ConfigError(RecDistillError):
    exit_code = 1


class ParameterError(RecDistillError, ValueError):
    exit_code = 1


class DataError(RecDistillError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class EmptyInputError(DataError):
    pass


class EmptyAfterFilterError(DataError):
    pass


class StaleArtifactError(DataError):
    pass


class GenerationError(DataError):
    pass


class InputError(RecDistillError, ValueError):
    exit_code = 1


class ShapeError(RecDistillError, ValueError):
    exit_code = 1


class NumericError(RecDistillError, ArithmeticError):
    exit_code = 3


class TrainingError(RecDistillError):
    exit_code = 3

    def __init__(self, message: str, epoch: int = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class TeacherError(TrainingError):
    pass


class ConsistencyError(RecDistillError):
    exit_code = 3


class EvaluationError(RecDistillError):
    exit_code = 4


class UndefinedMetricError(EvaluationError):
    pass


class HandleMismatchError(EvaluationError):
    pass
