"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A model, dataset or training configuration violates its constraints."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward)."""


class GradCheckError(FloatingPointError):
    """A finite-difference probe produced a non-finite value."""


class DegenerateEmbeddingError(FloatingPointError):
    """An embedding row has (near) zero norm and cannot be cosine-normalized."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""


class FormatError(ValueError):
    """A binary file does not follow its documented layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
