"""Exception hierarchy shared by all modules."""


class TfceGrfError(Exception):
    """Base class for every error raised by this package."""


class DataError(TfceGrfError, ValueError):
    """Input data is invalid for the requested operation."""


# --- NIfTI I/O -------------------------------------------------------------
class NiftiError(DataError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class UnsupportedDim(NiftiError):
    pass


class TruncatedStream(NiftiError):
    pass


class IndexOutOfBounds(TfceGrfError, IndexError):
    pass


# --- clustering / enhancement ---------------------------------------------
class EmptyMask(DataError):
    pass


class VoxelBelowThreshold(DataError):
    pass


class NonPositiveStep(DataError):
    pass


class MissingAntiderivative(DataError):
    pass


# --- GRF ------------------------------------------------------------------
class DegenerateResiduals(DataError):
    pass


class InvalidRegime(DataError):
    pass


class QuadratureFailure(TfceGrfError, ArithmeticError):
    pass


class InvalidSupport(DataError):
    pass


class NonPositiveMax(DataError):
    pass


class CacheCorrupt(TfceGrfError):
    pass


# --- inference / simulation -----------------------------------------------
class NonPositiveMap(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class ConstantInput(DataError):
    pass


class UnknownExperiment(TfceGrfError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
