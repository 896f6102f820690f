"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""


class LDCTError(Exception):
    exit_code = 1


class ValidationError(LDCTError, ValueError):
    exit_code = 2


class ConfigurationError(LDCTError, ValueError):
    exit_code = 2


class ContractViolation(LDCTError):
    exit_code = 2


class DependencyError(LDCTError):
    exit_code = 3


class TrainingFault(LDCTError, RuntimeError):
    exit_code = 4


class InferenceFault(LDCTError, RuntimeError):
    exit_code = 4


class StageError(LDCTError):
    """Wraps an error raised inside one stage of the inference cascade."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
