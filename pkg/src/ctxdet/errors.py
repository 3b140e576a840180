class ConfigError(Exception):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


class DataError(Exception):
    """Missing or malformed dataset / snapshot files (CLI exit code 3)."""


class NumericError(Exception):
    """Non-finite values where finite math is required (CLI exit code 4)."""
