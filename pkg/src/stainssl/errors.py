"""Exception hierarchy shared by all pipeline stages."""


class StainSslError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(StainSslError):
    """An argument violates a documented precondition."""


class InsufficientTissueError(StainSslError):
    """Too few foreground pixels to estimate a stain basis."""

    def __init__(self, slide_id: str, n_foreground: int, required: int):
        self.slide_id = slide_id
        self.n_foreground = n_foreground
        self.required = required
        super().__init__(
            f"slide {slide_id!r}: {n_foreground} foreground pixels, "
            f"need at least {required}"
        )


class DegenerateStainError(StainSslError):
    """Foreground pixels are (near) collinear in OD space: one stain only."""

    def __init__(self, slide_id: str, spread_degrees: float):
        self.slide_id = slide_id
        self.spread_degrees = spread_degrees
        super().__init__(
            f"slide {slide_id!r}: angular spread {spread_degrees:.4f} deg "
            "is below 1 deg; cannot separate two stains"
        )


class ConditioningError(StainSslError):
    """Stain vectors too close to collinear to build a conversion matrix."""


class InvalidBasisError(StainSslError):
    """A stain basis fails its invariants (bad norms, mismatched matrices)."""


class BasisMismatchError(StainSslError):
    """A stain basis was estimated for a different slide than the input."""


class AnnotationError(StainSslError):
    """A polygon annotation is malformed."""

    def __init__(self, polygon_index: int, reason: str):
        self.polygon_index = polygon_index
        super().__init__(f"polygon {polygon_index}: {reason}")


class ConfigurationError(StainSslError):
    """A run configuration is inconsistent or incomplete."""


class EvaluationError(StainSslError):
    """Metrics cannot be computed (e.g. a class with zero samples)."""


class NumericFaultError(StainSslError):
    """A non-finite value appeared during model execution."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values in {where}")
