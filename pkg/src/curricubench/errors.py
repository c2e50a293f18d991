"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`CurricubenchError`. Errors caused by bad user input (manifests,
label files, malformed CSVs) also derive from :class:`ValidationError`,
which the CLI maps to exit code 2; everything else maps to exit code 3.
"""


class CurricubenchError(Exception):
    pass


class ValidationError(CurricubenchError):
    pass


# data
class FormatError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ImageReadError(CurricubenchError, OSError):
    """An image file could not be read or decoded. The message names the file."""


class StratifyError(CurricubenchError):
    pass


class WeightError(CurricubenchError):
    pass


class GenerationError(CurricubenchError):
    pass


# shared
class ShapeError(CurricubenchError, ValueError):
    pass


class NumericError(CurricubenchError, ArithmeticError):
    pass


class EmptyError(CurricubenchError, ValueError):
    pass


# backbone
class CorruptCheckpointError(CurricubenchError):
    pass


class TransferError(CurricubenchError):
    pass


# ssl
class StateError(CurricubenchError):
    pass


class DegenerateBatchError(CurricubenchError):
    pass


class TaskError(CurricubenchError):
    pass


# curriculum / classify
class SearchError(CurricubenchError):
    pass


class DegenerateDataError(CurricubenchError):
    pass


# attention
class EmptyMaskError(CurricubenchError):
    pass


class ZeroAttentionError(CurricubenchError):
    pass


class MaskError(ValidationError):
    pass


# cli
class ManifestError(ValidationError):
    pass
