"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """A dataset file violates the IDX binary layout."""


class DataConsistencyError(ValueError):
    """Image and label files disagree with each other."""


class PartitionError(RuntimeError):
    """A non-IID partition could not satisfy its constraints."""


class DegenerateScoresError(RuntimeError):
    """Client scores carry no two-cluster structure."""


class ConfigError(ValueError):
    """An experiment configuration file is malformed."""
