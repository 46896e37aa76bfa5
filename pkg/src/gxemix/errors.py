"""Exception hierarchy shared across the package.

Every error carries a short machine-parsable code so the CLI can emit
single-line diagnostics and a stable exit status.
"""


class GxemixError(Exception):
    code = "E_GENERAL"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ValidationError(GxemixError):
    """Malformed or inconsistent input data."""

    code = "E_VALIDATION"


class StageOneError(GxemixError):
    """Plot-level analysis cannot produce means with defined variances."""

    code = "E_STAGE1"


class FitError(GxemixError):
    """Model fitting failed structurally (not mere non-convergence)."""

    code = "E_FIT"


class ConfigError(GxemixError):
    """Bad CLI/config usage."""

    code = "E_CONFIG"
