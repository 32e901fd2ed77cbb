"""
Exception hierarchy for the toolkit

Every error the command line turns into a one-line message derives from ToolkitError.
Value objects still raise plain ValueError for nonsensical inputs.
"""

from typing import Optional


class ToolkitError(Exception):
    """Base class for every recoverable, reportable failure"""


class UsageError(ToolkitError):
    """Unknown flag, missing argument or bad subcommand"""

    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


# --- sql-model ---------------------------------------------------------------

class SqlSyntaxError(ToolkitError):
    """
    Malformed SQL

        position: character offset into the original text (0-based)
        token: offending token text, when known
    """

    def __init__(self, message: str, position: int = 0, token: str = ""):
        super().__init__(f"{message} (at position {position}{f', token {token!r}' if token else ''})")
        self.position = position
        self.token = token
        self.reason = message


class UnsupportedStatement(ToolkitError):
    """Top-level statement is not a SELECT (INSERT/UPDATE/DDL/...)"""


# --- corpus ------------------------------------------------------------------

class FormatError(ToolkitError):
    def __init__(self, message: str, index: Optional[int] = None):
        prefix = f"entry {index}: " if index is not None else ""
        super().__init__(prefix + message)
        self.index = index


class MissingField(FormatError):
    def __init__(self, field_name: str, index: int):
        super().__init__(f"missing field {field_name!r}", index)
        self.field_name = field_name


class DanglingForeignKey(ToolkitError):
    """Recorded on the schema, never raised by the loader"""


class DatabaseUnreadable(ToolkitError):
    pass


class TableMissingInDbFile(ToolkitError):
    """Recorded as a description warning"""


# --- cot-builder -------------------------------------------------------------

class SchemaMismatch(ToolkitError):
    pass


class EmptyQuestion(ToolkitError):
    pass


class EmptyReasoning(ToolkitError):
    pass


class InvalidRecord(ToolkitError):
    pass


class GoldExecutionFailed(ToolkitError):
    pass


# --- curator -----------------------------------------------------------------

class InsufficientBucket(ToolkitError):
    def __init__(self, bucket: str, available: int, required: int):
        super().__init__(f"bucket {bucket}: {available} available, {required} required")
        self.bucket = bucket
        self.available = available
        self.required = required


class SizeMismatch(ToolkitError):
    pass


# --- gateway -----------------------------------------------------------------

class AuthMissing(ToolkitError):
    pass


class EndpointUnreachable(ToolkitError):
    pass


# --- evaluator ---------------------------------------------------------------

class ExecError(ToolkitError):
    """Engine error; the engine's message is preserved verbatim"""


class QueryTimeout(ToolkitError):
    pass


class WriteAttempt(ToolkitError):
    pass


class IncompletePredictions(ToolkitError):
    pass


class MissingDatabase(ToolkitError):
    def __init__(self, db_id: str):
        super().__init__(f"no database file for {db_id!r}")
        self.db_id = db_id


# --- reporter ----------------------------------------------------------------

class MissingReport(ToolkitError):
    def __init__(self, run_name: str, path: str = ""):
        super().__init__(f"run {run_name!r}: report not found{f' at {path}' if path else ''}")
        self.run_name = run_name
