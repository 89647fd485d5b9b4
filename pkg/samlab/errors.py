class SamLabError(Exception):
    """Base class for every error raised by samlab."""


class ArgumentError(SamLabError, ValueError):
    pass


class ShapeError(ArgumentError):
    pass


class TapeStateError(SamLabError, RuntimeError):
    pass


class DataError(SamLabError, ValueError):
    pass


class FormatError(DataError):
    """
    Malformed file contents. Carries the file path and either the byte
    offset or the field name where validation failed.
    """

    def __init__(self, message, path=None, offset=None, field=None):
        self.path = path
        self.offset = offset
        self.field = field
        details = []
        if path is not None:
            details.append(f"file={path}")
        if offset is not None:
            details.append(f"offset={offset}")
        if field is not None:
            details.append(f"field={field}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class ConfigError(SamLabError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class NumericalError(SamLabError, ArithmeticError):
    pass


class NumericalAbort(NumericalError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")


class ConstraintViolation(NumericalError):
    pass
