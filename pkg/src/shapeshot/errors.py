"""Exception taxonomy shared across modules; the CLI maps these to exit codes."""


class UsageError(Exception):
    """Bad flags, malformed config, unknown keys. Exit code 1."""


class DataError(Exception):
    """Missing or inconsistent input artifacts. Exit code 2."""


class NumericError(Exception):
    """Non-finite values where finite math was required. Exit code 3."""
