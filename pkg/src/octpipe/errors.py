"""Exception hierarchy shared by every stage of the pipeline."""


class OctError(Exception):
    """Base class for all pipeline errors."""


# core imaging
class NoFrames(OctError):
    pass


class DimensionMismatch(OctError, ValueError):
    pass


class DecodeError(OctError):
    pass


class IoError(OctError, OSError):
    pass


class GroupMismatch(OctError, ValueError):
    pass


# phantom
class SpecInvalid(OctError, ValueError):
    pass


# metrics
class ConstantInput(OctError, ValueError):
    pass


# registration
class AllGaps(OctError):
    pass


class ImageTooSmall(OctError, ValueError):
    pass


class MixedDescriptorKinds(OctError, TypeError):
    pass


class InsufficientMatches(OctError):
    pass


class Degenerate(OctError):
    pass


class NoSlab(OctError):
    pass


# shadow
class BadParams(OctError, ValueError):
    pass


class Malformed(OctError, ValueError):
    pass


class NoMatchingFrames(OctError):
    pass


class RegionOutOfBounds(OctError, ValueError):
    pass


class NoRegions(OctError, ValueError):
    pass


# layers
class NoBoundaries(OctError):
    pass


class FilledMask(OctError, ValueError):
    """Mask looks like filled regions rather than boundary lines."""


class NoOverlapColumns(OctError):
    pass


class UnknownLayer(OctError, KeyError):
    pass


# cli / pipeline
class ConfigInvalid(OctError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
