"""Exception types that map onto CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration or command-line usage (exit code 2)."""


class DataError(Exception):
    """Unreadable or inconsistent input data (exit code 3)."""
