"""
Exception hierarchy for the CCE image-analysis pipeline.

Every error raised on purpose by the package derives from `CceError`. The CLI
maps the validation-class errors (`ValidationClassError`) to exit code 2 and
anything else to exit code 1.
"""


class CceError(Exception):
    """Root of all package errors."""


class ValidationClassError(CceError):
    """Errors caused by bad input rather than a fault in the code."""


class ConfigValidationError(ValidationClassError):
    """The configuration document failed schema validation."""


class DatasetError(ValidationClassError):
    """A dataset is empty, unbalanced, or otherwise unusable for the request."""


class MissingArtifactError(ValidationClassError):
    """A trained model or fitted artifact a stage needs is not on disk."""

    def __init__(self, stage: str, path):
        self.stage = stage
        self.path = path
        super().__init__(f"Stage '{stage}' is missing its artifact: {path}")


class ConsistencyCheckError(ValidationClassError):
    """A size confusion matrix disagrees with the published one."""


class ShapeMismatchError(CceError):
    """A network node received an input of the wrong shape."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"Node '{node}': {message}")


class StaleCacheError(CceError):
    """A forward cache was used with parameters other than the ones that produced it."""


class NonFiniteLossError(CceError):
    """Training produced a NaN or infinite loss."""


class NonFiniteValueError(CceError):
    """A node produced a NaN or infinite activation or input gradient."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"Node '{node}': {message}")


class AsymmetricMatrixError(CceError):
    """An eigen-solver input was not symmetric within tolerance."""


class NotPositiveDefiniteError(CceError):
    """A Cholesky factorization met a non-positive pivot."""


class GeometryError(CceError):
    """A region or image is too small or too degenerate for the requested measurement."""


class MultiRoiError(CceError):
    """A ground-truth mask holds more than one region of interest."""


class _OffsetError(CceError):
    """A parse error that knows where in the byte stream it happened."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class NetpbmFormatError(_OffsetError):
    """Malformed or truncated PPM/PGM data."""


class ModelFormatError(_OffsetError):
    """Malformed or truncated parameter file."""
