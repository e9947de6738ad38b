"""Exception types shared across the package."""


class SrcrError(Exception):
    """Base class for all errors raised by srcr."""


class ShapeError(SrcrError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SrcrError, ValueError):
    """An input lies outside the domain of an operation (e.g. log of 0)."""


class ContractError(SrcrError, RuntimeError):
    """A call-site precondition was violated."""


class ConfigError(SrcrError, ValueError):
    """A configuration value is out of range."""


class StructuralError(SrcrError, ValueError):
    """A hypergraph cannot be normalized or built as requested."""


class EvaluationError(SrcrError, ValueError):
    """Retrieval metrics cannot be computed for the given ranking."""


class ParseError(SrcrError, ValueError):
    """A binary file is malformed.  ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
