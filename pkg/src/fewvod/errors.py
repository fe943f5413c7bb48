"""Shared exception types, mapped to CLI exit codes by `fewvod.cli`."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(Exception):
    """Malformed datasets, manifests, or record files (CLI exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite values or infeasible numeric problems (CLI exit code 4)."""


class InvalidBoxError(DataError):
    """A bounding box violates the w >= 0, h >= 0 / corner-ordering invariants."""


class CheckpointError(DataError):
    """A checkpoint file is missing, corrupt, or has an unknown format."""
