"""Package exception hierarchy.

DataError covers malformed or inconsistent inputs (CLI exit code 2),
FitError covers optimizer non-convergence and degenerate likelihoods
(CLI exit code 3).
"""


class DroughtSpiError(Exception):
    pass


class DataError(DroughtSpiError):
    pass


class FitError(DroughtSpiError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ExtrapolationWarning(UserWarning):
    pass
