"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its precondition."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or cannot be satisfied."""


class NoTrainingData(ValueError):
    """Training was requested on an empty example set."""
