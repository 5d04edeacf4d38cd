"""Exception types raised across the package."""


class Stereo3DError(Exception):
    """Base class for all package errors."""


# geometry
class NonPositiveDepth(Stereo3DError, ValueError):
    pass


class MissingMatrix(Stereo3DError, ValueError):
    pass


class MalformedMatrix(Stereo3DError, ValueError):
    pass


class DegenerateRig(Stereo3DError, ValueError):
    pass


# box3d
class BehindCamera(Stereo3DError, ValueError):
    pass


# anchor
class EmptyClass(Stereo3DError, ValueError):
    pass


# nn
class ShapeMismatch(Stereo3DError, ValueError):
    pass


class DegenerateRoi(Stereo3DError, ValueError):
    pass


class CheckpointVersionMismatch(Stereo3DError):
    pass


class CheckpointShapeMismatch(Stereo3DError):
    pass


# pipeline
class NoPotentialAnchors(Stereo3DError):
    pass


class DatasetEmpty(Stereo3DError, ValueError):
    pass


# dataset
class FieldCount(Stereo3DError, ValueError):
    pass


class NonNumeric(Stereo3DError, ValueError):
    pass


class PlacementFailure(Stereo3DError):
    pass


class MissingFile(Stereo3DError, FileNotFoundError):
    pass


class IdMismatch(Stereo3DError):
    pass
