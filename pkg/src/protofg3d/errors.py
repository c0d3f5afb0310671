"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``NumericalError`` subclasses with 3.
"""


class ProtoError(Exception):
    """Base class for all package errors."""


class ContractError(ProtoError, ValueError):
    """A documented precondition was violated by the caller."""


class DataError(ProtoError):
    """Problem with an input file or dataset (exit code 2)."""


class IoFailure(DataError):
    pass


class FormatMismatch(DataError):
    pass


class CountMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnknownKey(ParseError):
    def __init__(self, name, line=None, path=None):
        self.name = name
        super().__init__(f"unknown key {name!r}", line=line, path=path)


class RaggedViews(DataError):
    def __init__(self, shape_id, expected, found):
        self.shape_id = shape_id
        super().__init__(
            f"shape_id {shape_id} has {found} views, expected {expected}"
        )


class EmptyClass(DataError):
    def __init__(self, cls):
        self.cls = cls
        super().__init__(f"class {cls} has no embeddings")


class InfeasibleSeparation(DataError):
    pass


class NumericalError(ProtoError):
    """Numerical failure (exit code 3)."""


class NonConvergence(NumericalError):
    """Solver did not meet its tolerance.

    Carries the best iterate seen so callers may still use it.
    """

    def __init__(self, message, z=None, violation=None, iterations=None, scalings=None):
        super().__init__(message)
        self.z = z
        self.violation = violation
        self.iterations = iterations
        self.scalings = scalings


class NumericalOverflow(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, step, value):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss {value!r} at epoch {epoch} step {step}")


class DegenerateEmbedding(NumericalError):
    pass
