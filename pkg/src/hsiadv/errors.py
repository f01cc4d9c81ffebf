"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary file (cube, labels, model) is malformed or has the wrong version."""


class DataError(ValueError):
    """File parsed fine but the payload violates a data contract (non-finite, out of range)."""


class ShapeError(ValueError):
    """Operands passed to a tensor op have incompatible shapes or dtypes."""


class GraphError(RuntimeError):
    """A gradient-graph contract was violated (e.g. backward on a non-scalar)."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
