"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class LandfallError(Exception):
    exit_code = 1


class UsageError(LandfallError):
    exit_code = 2


class DataFormatError(LandfallError):
    exit_code = 3


class NotFoundError(DataFormatError, KeyError):
    exit_code = 3

    def __str__(self):
        return Exception.__str__(self)


class NumericalError(LandfallError):
    exit_code = 4


class ShapeError(LandfallError, ValueError):
    exit_code = 2
