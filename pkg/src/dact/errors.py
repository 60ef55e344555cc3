"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericalAbort -> 4.
"""


class DactError(Exception):
    pass


class ConfigError(DactError):
    """Invalid or inconsistent configuration / usage."""


class DataError(DactError):
    """Problems with input data files or their contents."""


class ManifestError(DataError):
    """Malformed dataset manifest (carries a line number when known)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class EmptyManifestError(ManifestError):
    pass


class InfeasibleFoldError(DataError):
    pass


class InsufficientFramesError(DataError):
    pass


class MissingFlowError(DataError):
    """A required quantized-flow file is absent; names the pair."""


class CheckpointError(DataError):
    pass


class NumericalAbort(DactError):
    """Non-finite value encountered during optimization."""

    def __init__(self, message, tensor=None, iteration=None):
        detail = message
        if tensor is not None:
            detail += f" [tensor={tensor}]"
        if iteration is not None:
            detail += f" [iteration={iteration}]"
        super().__init__(detail)
        self.tensor = tensor
        self.iteration = iteration
