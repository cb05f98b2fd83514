"""Exception taxonomy, aligned with the CLI exit codes.

ConfigError -> exit 1 (usage / configuration), DataError -> exit 2 (corpus,
manifest or mask problems), anything else -> exit 3 (runtime).
"""


class TidesegError(Exception):
    pass


class ConfigError(TidesegError):
    """Invalid configuration or incompatible shapes/flags."""


class DataError(TidesegError):
    """Bad or missing corpus data: manifests, images, masks, annotations."""


class StreamError(DataError):
    """Inconsistent frame stream fed to the sequential engine."""


class RuntimeFailure(TidesegError):
    """Unrecoverable runtime fault, e.g. a non-finite training loss."""
