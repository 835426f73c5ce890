class KcitError(Exception):
    """Base exception for every kcit service. Carries the CLI exit code."""

    exit_code = 1


class NumericalError(KcitError):
    """Raised when a factorization or eigensolver fails for good."""

    exit_code = 7
