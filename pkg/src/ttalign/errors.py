"""Shared error types.

ConfigError: a caller-supplied configuration value is out of range or inconsistent.
ContractError: a runtime precondition was violated (bad distribution, empty tape, ...).
ShapeError: operand shapes do not conform for a primitive.
"""


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ShapeError(ValueError):
    pass
