"""Error taxonomy shared across the package.

Numeric failures (``NumericsError``) and shape failures (``ShapeError``)
live in :mod:`dualcast.tensor` next to the operations that raise them.
"""


class ConfigError(ValueError):
    """A run configuration is inconsistent or violates a contract."""


class DataError(ValueError):
    """A dataset file or array is malformed or unusable."""
