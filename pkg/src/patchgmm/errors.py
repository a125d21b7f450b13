"""Exception types shared across the package."""


class PatchGmmError(Exception):
    """Base class for all package errors."""


class FormatError(PatchGmmError):
    """A file does not conform to the expected binary layout."""


class ValidationError(PatchGmmError):
    """An input violates a documented invariant (non-finite data, empty mask, ...)."""


class ShapeError(PatchGmmError):
    """Array dimensions of paired inputs do not agree."""


class ParameterError(PatchGmmError):
    """A scalar argument is outside its allowed range."""


class CoverageError(PatchGmmError):
    """A voxel is covered by no patch during stitching."""


class ManifestError(PatchGmmError):
    """A model manifest is missing an entry required for the requested volume."""


class NumericalError(PatchGmmError):
    """A numerical result is non-finite or a factorization failed irrecoverably."""


class InitializationError(PatchGmmError):
    """Model initialization received too little data."""


class ConfigError(PatchGmmError):
    """A run configuration file or flag value cannot be interpreted."""


class InfinitePsnrError(PatchGmmError):
    """PSNR is undefined because the mean squared error is exactly zero."""
