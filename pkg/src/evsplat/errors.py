"""Exception types raised across the package."""


class EvsplatError(Exception):
    """Base class for all package errors."""


class InputError(EvsplatError):
    """Malformed or inconsistent user input (files, configs, arrays)."""


class FormatError(InputError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)


class OutOfBounds(InputError):
    pass


class SchemaError(InputError):
    def __init__(self, message, path="$"):
        self.path = path
        super().__init__(f"{path}: {message}")


class DimensionMismatch(InputError, ValueError):
    pass


class EmptyStream(InputError):
    pass


class BadSpec(InputError, ValueError):
    pass


class TooFewFrames(InputError, ValueError):
    pass


class BehindCamera(EvsplatError):
    pass


class EmptyCloud(EvsplatError):
    pass


class MissingForwardState(EvsplatError):
    pass


class EmptyDataset(InputError):
    pass


class EmptyRefinementSet(InputError):
    pass


class NoSurvivors(EvsplatError):
    pass
