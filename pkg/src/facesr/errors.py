"""Exception types shared across the package."""

from __future__ import annotations


class FaceSRError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(FaceSRError):
    pass


class AxisOutOfRange(FaceSRError):
    pass


class NonScalarLoss(FaceSRError):
    pass


class NonIntegralOutputSize(FaceSRError):
    pass


class DegenerateBatch(FaceSRError):
    pass


class OddSpatialDim(FaceSRError):
    pass


class BatchTooSmall(FaceSRError):
    pass


class BadStep(FaceSRError):
    pass


class AlphaOutOfRange(FaceSRError):
    pass


class ResolutionMismatch(FaceSRError):
    pass


class NotNormalized(FaceSRError):
    pass


class ImageTooSmall(FaceSRError):
    pass


class CountMismatch(FaceSRError):
    pass


class AllInvisible(FaceSRError):
    pass


class EmptyManifest(FaceSRError):
    pass


class MalformedLandmarkRecord(FaceSRError):
    pass


class UnreadableImage(FaceSRError):
    pass


class VersionMismatch(FaceSRError):
    pass


class CorruptChecksum(FaceSRError):
    pass


class DivergenceDetected(FaceSRError):
    pass


class MissingLandmarks(FaceSRError):
    pass
