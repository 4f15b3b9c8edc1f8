"""Exception hierarchy shared across the package."""


class AMTSSError(Exception):
    """Base class for all package errors."""


class DimensionError(AMTSSError, ValueError):
    pass


class NumericError(AMTSSError, ArithmeticError):
    pass


class VocabularyError(AMTSSError, ValueError):
    pass


class LanguageError(AMTSSError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConflictError(AMTSSError, ValueError):
    pass


class DataError(AMTSSError, ValueError):
    pass


class ConfigError(AMTSSError, ValueError):
    """Invalid configuration value. ``field`` is the dotted path of the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
