"""
Corpus entities

defines the records the toolkit reads and writes: corpus examples, schema
catalog entries, scored examples and materialized query results.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from src.models.complexity import DifficultyBucket
from src.models.sql_model import ClauseInventory


@dataclass(frozen=True)
class NlSqlExample:
    """
    One (question, gold SQL, database) triple from the source corpus

        source_index: position in the source file
        source: name of the source file; together with source_index it identifies the example
    """
    question: str
    gold_sql: str
    db_id: str
    source_index: int = 0
    source: str = ""

    def __post_init__(self):
        if not self.gold_sql or not self.gold_sql.strip():
            raise ValueError("gold_sql must not be empty")
        if not self.db_id:
            raise ValueError("db_id must not be empty")

    @property
    def key(self) -> str:
        """Benchmark item key used by prediction and report files"""
        return f"{self.db_id}#{self.source_index}"

    @property
    def identity(self) -> Tuple[str, int]:
        return (self.source, self.source_index)


@dataclass(frozen=True)
class Column:
    name: str
    declared_type: str = ""
    is_primary_key: bool = False
    is_not_null: bool = False


@dataclass(frozen=True)
class Table:
    name: str
    columns: Tuple[Column, ...] = ()


@dataclass(frozen=True)
class ForeignKey:
    """child_table.child_column -> parent_table.parent_column"""
    child_table: str
    child_column: str
    parent_table: str
    parent_column: str


@dataclass
class DbSchema:
    """
    Schema of one database

    tables and columns keep declaration order; names are unique case-insensitively.
    warnings collects non-fatal catalog problems (dangling foreign keys).
    """
    db_id: str
    tables: List[Table] = field(default_factory=list)
    foreign_keys: List[ForeignKey] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for table in self.tables:
            if table.name.lower() in seen:
                raise ValueError(f"{self.db_id}: duplicate table {table.name!r}")
            seen.add(table.name.lower())
            columns = [c.name.lower() for c in table.columns]
            if len(columns) != len(set(columns)):
                raise ValueError(f"{self.db_id}: duplicate column in table {table.name!r}")

    def table(self, name: str) -> Optional[Table]:
        for table in self.tables:
            if table.name.lower() == name.lower():
                return table
        return None


@dataclass(frozen=True)
class ScoredExample:
    """
    Example with its complexity score and difficulty bucket

    inventory is None when the example was read back from a dataset file
    (line records carry score and bucket only).
    """
    example: NlSqlExample
    score: float
    bucket: DifficultyBucket
    inventory: Optional[ClauseInventory] = None

    def __post_init__(self):
        if self.score < 0:
            raise ValueError("score must not be negative")

    def to_record(self) -> Dict[str, Any]:
        return {
            "question": self.example.question,
            "gold_sql": self.example.gold_sql,
            "db_id": self.example.db_id,
            "score": self.score,
            "bucket": self.bucket.value,
            "source_index": self.example.source_index,
            "source": self.example.source,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "ScoredExample":
        example = NlSqlExample(
            question=record["question"],
            gold_sql=record["gold_sql"],
            db_id=record["db_id"],
            source_index=int(record.get("source_index", 0)),
            source=record.get("source", ""),
        )
        return cls(example=example, score=float(record["score"]), bucket=DifficultyBucket.parse(record["bucket"]))


@dataclass(frozen=True)
class ResultTable:
    """
    Fully materialized query result

        columns: ordered column names
        rows: value tuples (int, float, str, bytes or None)
    """
    columns: Tuple[str, ...]
    rows: Tuple[Tuple[Any, ...], ...]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(f"row arity {len(row)} does not match {len(self.columns)} columns")

    @property
    def arity(self) -> int:
        return len(self.columns)
