"""Exception hierarchy for ECTR."""

from typing import Any, Optional


class EctrError(Exception):
    """Base class for all ECTR errors."""


class ShapeError(EctrError, ValueError):
    """Array dimensions do not chain or match."""


class InputError(EctrError, ValueError):
    """An argument is outside the domain of the operation."""


class ConfigError(EctrError, ValueError):
    """Configuration is invalid or inconsistent with the requested method."""


class SchemaError(EctrError, ValueError):
    """Column roles of a delimited file are incomplete."""


class ParseError(EctrError, ValueError):
    """A cell of a delimited file could not be parsed."""

    def __init__(self, message: str, path: str, row: int, column: str):
        super().__init__(f"{path}: row {row}, column '{column}': {message}")
        self.path = path
        self.row = row
        self.column = column


class NumericError(EctrError, ArithmeticError):
    """A non-finite value appeared during training or evaluation."""

    def __init__(self, message: str, player: str, snapshot: Optional[Any] = None):
        super().__init__(f"[{player}] {message}")
        self.player = player
        self.snapshot = snapshot
