"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(DimensionError):
    """Operand has the wrong number of axes."""


class ConfigurationError(ValueError):
    """Invalid hyperparameter, extent, or option."""


class ContractError(RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class BoundsError(IndexError):
    """Grid coordinate outside the valid range."""


class EvaluationError(FloatingPointError):
    """A function under evaluation produced a non-finite value."""


class UsageError(ValueError):
    """Bad command-line usage (empty test set, wrong image extents, ...)."""


class ParseError(ValueError):
    """Malformed file. Carries the offending path and byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        self.message = message
        super().__init__(f"{self.path}: byte {offset}: {message}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, dump_path, message):
        self.step = step
        self.dump_path = dump_path
        super().__init__(f"step {step}: {message} (diagnostics in {dump_path})")
