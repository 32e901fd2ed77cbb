"""
Read-only access to the benchmark's SQLite database files

Every connection is opened in read-only URI mode with query_only switched on,
so nothing run through this class can change a database file. The same class
serves schema introspection, sample-value reads and guarded query execution.
"""

import hashlib
import logging
import sqlite3
import time
from pathlib import Path
from typing import Any, List, Optional, Union

from src.database.models import Column, ForeignKey, ResultTable, Table
from src.errors import DatabaseUnreadable, ExecError, QueryTimeout

logger = logging.getLogger(__name__)

# progress handler granularity (SQLite VM instructions between deadline checks)
_PROGRESS_STEPS = 1000


def quote_identifier(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


class ShadowDatabase:
    """
    Read-only view of one database file

    follows dependency injection, the file path is passed in; the file must already exist
    """

    def __init__(self, db_path: Union[str, Path]):
        self.db_path = Path(db_path)
        if not self.db_path.is_file():
            raise DatabaseUnreadable(f"{self.db_path}: no such database file")

    def _get_connection(self) -> sqlite3.Connection:
        """
        Open a read-only connection

        mode=ro refuses writes at the file level, query_only refuses them at the statement level
        """
        uri = self.db_path.resolve().as_uri() + "?mode=ro"
        try:
            conn = sqlite3.connect(uri, uri=True, check_same_thread=False)
            # some benchmark databases hold text that is not valid UTF-8
            conn.text_factory = lambda raw: raw.decode("utf-8", errors="replace")
            conn.execute("PRAGMA query_only = ON")
            conn.execute("SELECT count(*) FROM sqlite_master").fetchone()
        except sqlite3.Error as error:
            raise DatabaseUnreadable(f"{self.db_path}: {error}") from error
        conn.row_factory = sqlite3.Row
        return conn

    def digest(self) -> str:
        """sha256 of the file bytes, used to prove evaluation left the file untouched"""
        return hashlib.sha256(self.db_path.read_bytes()).hexdigest()

    def table_names(self) -> List[str]:
        conn = self._get_connection()
        try:
            rows = conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            ).fetchall()
        finally:
            conn.close()
        return [row["name"] for row in rows]

    def find_table(self, name: str) -> Optional[str]:
        """Actual spelling of a table name, matched case-insensitively"""
        for table in self.table_names():
            if table.lower() == name.lower():
                return table
        return None

    def read_tables(self) -> List[Table]:
        """
        Tables with their declared column types, PRIMARY KEY and NOT NULL flags

        declared types come back verbatim from the DDL (e.g. VARCHAR(50))
        """
        conn = self._get_connection()
        try:
            tables = []
            for name in self._names(conn):
                info = conn.execute(f"PRAGMA table_info({quote_identifier(name)})").fetchall()
                columns = tuple(
                    Column(
                        name=row["name"],
                        declared_type=row["type"] or "",
                        is_primary_key=bool(row["pk"]),
                        is_not_null=bool(row["notnull"]),
                    )
                    for row in info
                )
                tables.append(Table(name=name, columns=columns))
            return tables
        finally:
            conn.close()

    def read_foreign_keys(self) -> List[ForeignKey]:
        conn = self._get_connection()
        try:
            keys = []
            for name in self._names(conn):
                for row in conn.execute(f"PRAGMA foreign_key_list({quote_identifier(name)})").fetchall():
                    parent_column = row["to"]
                    if parent_column is None:
                        # REFERENCES parent without a column list points at the parent's primary key
                        parent_column = self._primary_key(conn, row["table"]) or ""
                    keys.append(ForeignKey(name, row["from"], row["table"], parent_column))
            return keys
        finally:
            conn.close()

    def sample_values(self, table: str, column: str, limit: int) -> List[Any]:
        """
        First `limit` distinct non-null values of a column in rowid order

        tables declared WITHOUT ROWID fall back to storage order
        """
        if limit <= 0:
            return []
        source = f"SELECT {quote_identifier(column)} FROM {quote_identifier(table)} WHERE {quote_identifier(column)} IS NOT NULL"
        conn = self._get_connection()
        try:
            try:
                cursor = conn.execute(source + " ORDER BY rowid")
            except sqlite3.OperationalError:
                cursor = conn.execute(source)

            values: List[Any] = []
            seen = set()
            for row in cursor:
                value = row[0]
                if value in seen:
                    continue
                seen.add(value)
                values.append(value)
                if len(values) >= limit:
                    break
            return values
        finally:
            conn.close()

    def execute(self, sql: str, timeout: float = 30.0) -> ResultTable:
        """
        Run one statement and materialize the full result

        Args:
            sql: statement text
            timeout: seconds before the statement is interrupted

        Returns:
            ResultTable

        Raises:
            QueryTimeout: the deadline passed while executing or fetching
            ExecError: any engine error, message preserved
        """
        conn = self._get_connection()
        deadline = time.monotonic() + timeout
        expired = False

        def watchdog() -> int:
            nonlocal expired
            # a non-zero return makes SQLite abort the running statement
            if time.monotonic() > deadline:
                expired = True
                return 1
            return 0

        conn.set_progress_handler(watchdog, _PROGRESS_STEPS)
        try:
            cursor = conn.execute(sql)
            rows = cursor.fetchall()
            columns = tuple(d[0] for d in cursor.description or ())
        except (sqlite3.Error, sqlite3.Warning) as error:
            if expired:
                raise QueryTimeout(f"query exceeded {timeout:g}s") from error
            raise ExecError(str(error)) from error
        finally:
            conn.close()

        return ResultTable(columns=columns, rows=tuple(tuple(row) for row in rows))

    @staticmethod
    def _names(conn: sqlite3.Connection) -> List[str]:
        rows = conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
        ).fetchall()
        return [row["name"] for row in rows]

    @staticmethod
    def _primary_key(conn: sqlite3.Connection, table: str) -> Optional[str]:
        for row in conn.execute(f"PRAGMA table_info({quote_identifier(table)})").fetchall():
            if row["pk"]:
                return row["name"]
        return None
