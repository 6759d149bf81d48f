"""Exception hierarchy shared across the package.

Exit codes follow the CLI contract: 1 validation, 2 missing dependency,
3 runtime/compute failure.
"""


class VolsynthError(Exception):
    exit_code = 3


class ValidationError(VolsynthError):
    """Bad inputs, shapes, or configuration caught before any compute."""

    exit_code = 1


class DependencyError(VolsynthError):
    """A prerequisite artifact (checkpoint, dataset) is missing or stale."""

    exit_code = 2


class ComputeError(VolsynthError):
    """Runtime failure mid-compute (non-finite loss, failed stage)."""

    exit_code = 3


class VolumeIOError(VolsynthError):
    """Corrupt or inconsistent on-disk volume data."""

    exit_code = 3
