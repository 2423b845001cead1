# exceptions.py
# LeaSE Engine - Error Hierarchy
# Created by Digital COE Gen AI Team


class LeaseError(Exception):
    """Base class for every error raised by the engine."""

    exit_code: int = 2


# Configuration & input errors (exit code 1)

class ConfigError(LeaseError, ValueError):
    """Run configuration could not be parsed or validated."""

    exit_code = 1

    def __init__(self, message: str, field: str = None, line: int = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        elif field:
            prefix = f"{field}: "
        super().__init__(f"{prefix}{message}")


class GenotypeSchemaError(ConfigError):
    """Genotype file does not match the expected schema or cell spec."""


class DataError(LeaseError, ValueError):
    """Dataset could not be loaded or partitioned."""

    exit_code = 1


class IdxMagicError(DataError):
    """IDX file starts with an unexpected magic number."""


class IdxTruncatedError(DataError):
    """IDX file is shorter than its header declares."""


class IdxCountMismatchError(DataError):
    """IDX image and label files disagree on the item count."""


class EmptySplitError(DataError):
    """A requested partition would contain no examples."""


# Numeric errors (exit code 2)

class NumericError(LeaseError, ArithmeticError):
    """Numerical contract violated during compute."""


class ShapeMismatchError(NumericError, ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {rendered}")


class NonFiniteError(NumericError, FloatingPointError):
    """A NaN or Inf reached an op input or a gradient."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value in {where}")


class NormalizationError(NumericError, ValueError):
    """Probability rows do not sum to one."""


class NonScalarRootError(NumericError, ValueError):
    """backward() was called on a non-scalar tensor."""


class NumericAbortError(NumericError):
    """A run was aborted because a logged quantity or state tensor went non-finite."""

    def __init__(self, quantity: str, iteration: int):
        self.quantity = quantity
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {quantity} is not finite; aborting")
