"""Exception hierarchy shared by every module."""


class IclError(Exception):
    """Base class for all package errors."""


# tensor-core
class NonSquare(IclError):
    pass


class NotSymmetric(IclError):
    pass


class NoConvergence(IclError):
    pass


class ZeroMatrix(IclError):
    pass


class DimensionMismatch(IclError):
    pass


# taskgen
class InvalidSpec(IclError):
    pass


# solvers
class ZeroExample(IclError):
    pass


class Breakdown(IclError):
    pass


class Overflow(IclError):
    pass


class IndexOutOfRange(IclError):
    pass


# similarity
class StepOutOfRange(IclError):
    pass


class AllDegenerate(IclError):
    pass


class SingularProbeDesign(IclError):
    pass


# tfconstruct
class ShapeMismatch(IclError):
    pass


class InvalidSlice(IclError):
    pass


class InvalidDims(IclError):
    pass


# cli-report
class ConfigError(IclError):
    pass


class IOFailure(IclError):
    pass


class FormatError(IclError):
    pass


class SeqMismatch(IclError):
    pass


class SparseTrace(IclError):
    pass
