class SphereVpError(Exception):
    """Base class for every error raised by spherevp."""


# Geometry
# ------------------------

class DegenerateSegment(SphereVpError, ValueError):
    pass


class NearPolarLine(SphereVpError, ValueError):
    pass


class Indeterminate(SphereVpError, ValueError):
    pass


# Sphere raster
# ------------------------

class IndexOutOfRange(SphereVpError, IndexError):
    pass


class EmptyInput(SphereVpError, ValueError):
    pass


# Synthetic data
# ------------------------

class DegenerateScene(SphereVpError, RuntimeError):
    pass


class DatasetIOError(SphereVpError, OSError):
    pass


# Coarse net
# ------------------------

class ShapeMismatch(SphereVpError, ValueError):
    pass


class NonFiniteLoss(SphereVpError, FloatingPointError):
    def __init__(self, layer, batch_index):
        self.layer = layer
        self.batch_index = batch_index
        super().__init__(f"Non-finite loss at layer {layer!r}, batch {batch_index}")


class ModelFileError(SphereVpError, OSError):
    pass


class BadMagic(ModelFileError):
    pass


class VersionMismatch(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    pass


# EM refinement
# ------------------------

class AllZeroGrid(SphereVpError, ValueError):
    pass


class NoCandidates(SphereVpError, ValueError):
    pass


class NumericalUnderflow(SphereVpError, FloatingPointError):
    pass


class DegenerateCandidate(SphereVpError, ValueError):
    pass


# Horizon / calibration
# ------------------------

class NoValidTriplet(SphereVpError, ValueError):
    pass


class DegenerateFit(SphereVpError, ValueError):
    pass


class VerticalLine(SphereVpError, ValueError):
    pass


class ImaginaryFocal(SphereVpError, ValueError):
    pass


class CollinearTriplet(SphereVpError, ValueError):
    pass


class AntipodalDirection(SphereVpError, ValueError):
    pass


# Harness
# ------------------------

class TooFewSegments(SphereVpError, ValueError):
    pass
