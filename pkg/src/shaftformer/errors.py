"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class ShaftFormerError(Exception):
    exit_code = 2


class InvalidArgument(ShaftFormerError, ValueError):
    exit_code = 1


class InvalidConfig(InvalidArgument):
    pass


class ShapeMismatch(ShaftFormerError, ValueError):
    pass


class ParseError(ShaftFormerError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class InvariantViolation(ShaftFormerError):
    def __init__(self, message, record_id=None):
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)
        self.record_id = record_id


class InsufficientContext(ShaftFormerError, ValueError):
    pass


class ConfigMismatch(ShaftFormerError):
    pass


class DivergenceDetected(ShaftFormerError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)
        self.epoch = epoch
