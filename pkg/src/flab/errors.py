"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: configuration and input problems exit
with 2, numerical failures with 3.
"""


class FlabError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FlabError):
    """Invalid configuration: bad values, missing checkpoints, unknown names."""

    exit_code = 2


class InputError(FlabError):
    """Invalid runtime input: shape mismatches, out-of-range arguments."""

    exit_code = 2


class NumericalError(FlabError):
    """Numerical failure: divergence, non-finite losses, eigendecomposition."""

    exit_code = 3
