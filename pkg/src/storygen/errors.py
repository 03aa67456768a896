"""Error types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's shape or value contract."""


class DomainError(ValueError):
    """A numeric operation was applied outside its domain (log of <= 0, div by 0)."""


class ConfigError(ValueError):
    """A configuration value is out of bounds or unknown."""
