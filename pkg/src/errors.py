"""Excepciones compartidas por todo el pipeline G5.

Las funciones de librería lanzan; solo el CLI traduce a códigos de salida
(`exit_code`): 2 config/contrato, 3 aborto numérico, 4 I/O.
"""

from __future__ import annotations

from typing import Optional, Sequence


class G5Error(Exception):
    exit_code: int = 2


class ContractError(G5Error, ValueError):
    """Precondition or contract violation."""


class ShapeError(ContractError):
    def __init__(self, message: str, *shapes: Sequence[int]) -> None:
        if shapes:
            rendered = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ConfigError(G5Error, ValueError):
    pass


class ParseError(G5Error, ValueError):
    def __init__(self, path: str, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason


class EmptyDatasetError(ContractError):
    pass


class PipelineOrderError(ContractError):
    pass


class ModeViolation(ContractError):
    pass


class LabelAccessError(ContractError):
    pass


class SchemaError(G5Error, ValueError):
    pass


class NumericError(G5Error, ArithmeticError):
    exit_code = 3


class IntegrityError(G5Error):
    exit_code = 4


class IncompatibleVersionError(G5Error):
    exit_code = 4

    def __init__(self, found: int, expected: int, path: Optional[str] = None) -> None:
        where = f" ({path})" if path else ""
        super().__init__(f"Incompatible format version {found}, expected {expected}{where}")
        self.found = found
        self.expected = expected
