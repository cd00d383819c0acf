"""Exception hierarchy shared by all modules."""


class CancelHashError(Exception):
    """Base class for every error raised by the package."""


class ParseError(CancelHashError):
    def __init__(self, message, line=None):
        self.line = line
        self.detail = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInputError(CancelHashError):
    pass


class ValidationError(CancelHashError):
    pass


class DimensionError(CancelHashError):
    pass


class DomainError(CancelHashError, ValueError):
    pass


class NumericError(CancelHashError, ArithmeticError):
    pass


class IncompatibleTemplateError(CancelHashError):
    """Two templates (or a template and a key) were built with different parameters,
    or the stored template has been revoked."""


class InsufficientDataError(CancelHashError):
    pass


class StorageError(CancelHashError):
    pass


class IntegrityError(StorageError):
    pass


class ConflictError(StorageError):
    pass


class NotFoundError(StorageError):
    pass
