"""Exception types shared across the package."""


class CardiotwinError(Exception):
    """Base class for all package errors."""


class ShapeError(CardiotwinError, ValueError):
    """Array dimensions or grid shapes are inconsistent."""


class DomainError(CardiotwinError, ValueError):
    """Geometry or values fall outside the valid domain."""


class FormatError(CardiotwinError, ValueError):
    """A file does not conform to its on-disk format."""


class ManifestError(CardiotwinError, ValueError):
    """A cohort manifest is missing columns, paths, or has duplicates."""


class InsufficientSignalError(CardiotwinError, ValueError):
    """Too little signal content to complete detection."""


class DegenerateInputError(CardiotwinError, ValueError):
    """Input is constant or otherwise degenerate for the requested metric."""


class DegenerateAnatomyError(CardiotwinError, ValueError):
    """Anatomy is empty or below thresholds required by the analysis."""


class InsufficientFramesError(CardiotwinError, ValueError):
    """Not enough time frames for the requested temporal operation."""


class InsufficientDataError(CardiotwinError, ValueError):
    """Not enough data points for the requested statistic."""


class UndefinedDistanceError(CardiotwinError, ValueError):
    """Surface distance is undefined (an empty mask was supplied)."""


class DivergenceError(CardiotwinError, RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class IntegrationBlowupError(CardiotwinError, RuntimeError):
    """ODE integration produced a non-finite trajectory."""

    def __init__(self, voxel, time: float, message: str = ""):
        self.voxel = voxel
        self.time = time
        super().__init__(
            message or f"non-finite trajectory at voxel {voxel}, t={time:.6g}"
        )
