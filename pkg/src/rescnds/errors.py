"""Exception types shared across the package."""


class CNDSError(Exception):
    pass


class ShapeError(CNDSError, ValueError):
    pass


class ParameterError(CNDSError, ValueError):
    pass


class StateError(CNDSError, RuntimeError):
    pass


class ConfigError(CNDSError, ValueError):
    pass


class RewriteError(CNDSError, ValueError):
    pass


class ScheduleError(CNDSError, ValueError):
    pass


class NumericError(CNDSError, ArithmeticError):
    pass


class LabelError(CNDSError, ValueError):
    pass


class PreconditionError(CNDSError, ValueError):
    pass


class InputError(CNDSError, ValueError):
    pass


class ManifestError(CNDSError, ValueError):
    pass


class DecodeError(CNDSError, ValueError):
    pass


class CropError(CNDSError, ValueError):
    pass
