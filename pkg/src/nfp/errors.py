"""Exception hierarchy shared by every module."""


class NfpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NfpError, ValueError):
    pass


class ValidationError(NfpError, ValueError):
    pass


class FormatError(NfpError, ValueError):
    pass


class RegistryError(NfpError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(NfpError, ValueError):
    pass


class StateError(NfpError, RuntimeError):
    pass


class DivergenceError(NfpError, ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
