"""
Corpus ingestion and schema description

Reads the Spider-format example files and tables catalog, optionally refines
catalog schemas with the DDL declared in the database files, and renders the
"Table: <name>" schema description used inside prompts.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from src.database.db_manager import ShadowDatabase
from src.database.models import Column, DbSchema, ForeignKey, NlSqlExample, Table
from src.errors import DanglingForeignKey, DatabaseUnreadable, FormatError, MissingDatabase, MissingField, TableMissingInDbFile

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EXAMPLE_FIELDS = ("question", "query", "db_id")


@dataclass(frozen=True)
class DescribeOptions:
    """
        include_samples: append a "-- samples:" line after each column
        sample_count: distinct values per samples line
    """
    include_samples: bool = False
    sample_count: int = 3

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")


@dataclass(frozen=True)
class SchemaDescription:
    db_id: str
    text: str
    included_samples: bool = False
    sample_count: int = 0
    warnings: Tuple[str, ...] = ()


def database_path(spider_root: PathLike, db_id: str) -> Path:
    """<root>/database/<db_id>/<db_id>.sqlite"""
    return Path(spider_root) / "database" / db_id / f"{db_id}.sqlite"


def _read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as error:
        raise FormatError(f"{path}: cannot read ({error.strerror or error})") from error
    except json.JSONDecodeError as error:
        raise FormatError(f"{path}: not valid JSON ({error.msg} at line {error.lineno})") from error


def load_examples(path: PathLike) -> List[NlSqlExample]:
    """
    Load a Spider examples file (JSON array of question/query/db_id objects)

    Args:
        path: file path; its name becomes the examples' source label

    Returns:
        examples in file order, source_index = position in the file

    Raises:
        FormatError: not a JSON array, or an entry is malformed (entry index included)
        MissingField: an entry lacks question, query or db_id
    """
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of examples")

    examples = []
    for index, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise FormatError("expected an object", index)
        for name in EXAMPLE_FIELDS:
            if name not in entry:
                raise MissingField(name, index)
        query = entry["query"]
        if not isinstance(query, str) or not query.strip():
            raise FormatError("query must be non-empty text", index)
        if not entry["db_id"]:
            raise FormatError("db_id must be non-empty", index)

        examples.append(NlSqlExample(
            question=str(entry["question"]),
            gold_sql=query,
            db_id=str(entry["db_id"]),
            source_index=index,
            source=path.name,
        ))

    logger.info("loaded %d examples from %s", len(examples), path)
    return examples


def load_schemas(path: PathLike) -> Dict[str, DbSchema]:
    """
    Load a Spider tables catalog

    Foreign keys come as column-index pairs and are resolved to names. Pairs that
    point outside the column list are recorded in schema.warnings and dropped.
    """
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of schemas")

    schemas: Dict[str, DbSchema] = {}
    for index, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise FormatError("expected an object", index)
        schema = _catalog_schema(entry, index)
        if schema.db_id in schemas:
            raise FormatError(f"duplicate db_id {schema.db_id!r}", index)
        schemas[schema.db_id] = schema

    logger.info("loaded %d schemas from %s", len(schemas), path)
    return schemas


def _field(entry: Dict[str, Any], index: int, *names: str) -> Any:
    # the *_original spellings match the database files; fall back to the normalized ones
    for name in names:
        if name in entry:
            return entry[name]
    raise MissingField(names[0], index)


def _catalog_schema(entry: Dict[str, Any], index: int) -> DbSchema:
    db_id = _field(entry, index, "db_id")
    table_names = _field(entry, index, "table_names_original", "table_names")
    column_names = _field(entry, index, "column_names_original", "column_names")
    column_types = _field(entry, index, "column_types")
    if len(column_types) != len(column_names):
        raise FormatError(f"{db_id}: column_types and column_names differ in length", index)

    primary = set()
    for key in entry.get("primary_keys", []):
        # composite keys appear as nested lists in newer catalog releases
        primary.update(key if isinstance(key, list) else [key])

    per_table: List[List[Column]] = [[] for _ in table_names]
    # (table name, column name) by catalog column index; index 0 is the "*" pseudo-column
    located: Dict[int, Tuple[str, str]] = {}
    for col_index, (pair, declared_type) in enumerate(zip(column_names, column_types)):
        try:
            table_index, name = pair
        except (TypeError, ValueError) as error:
            raise FormatError(f"{db_id}: malformed column entry {pair!r}", index) from error
        if table_index < 0:
            continue
        if table_index >= len(table_names):
            raise FormatError(f"{db_id}: column {name!r} points at missing table {table_index}", index)
        per_table[table_index].append(Column(
            name=name,
            declared_type=str(declared_type),
            is_primary_key=col_index in primary,
        ))
        located[col_index] = (table_names[table_index], name)

    warnings = []
    foreign_keys = []
    for pair in entry.get("foreign_keys", []):
        try:
            child_index, parent_index = pair
        except (TypeError, ValueError) as error:
            raise FormatError(f"{db_id}: malformed foreign key {pair!r}", index) from error
        if child_index not in located or parent_index not in located:
            problem = DanglingForeignKey(f"{db_id}: foreign key {child_index} -> {parent_index} references no column")
            logger.warning("%s", problem)
            warnings.append(str(problem))
            continue
        child, parent = located[child_index], located[parent_index]
        foreign_keys.append(ForeignKey(child[0], child[1], parent[0], parent[1]))

    try:
        return DbSchema(
            db_id=db_id,
            tables=[Table(name, tuple(columns)) for name, columns in zip(table_names, per_table)],
            foreign_keys=foreign_keys,
            warnings=warnings,
        )
    except ValueError as error:
        raise FormatError(str(error), index) from error


def introspect_schema(db_id: str, db_file: PathLike) -> DbSchema:
    """Schema straight from a database file's declared DDL"""
    database = ShadowDatabase(db_file)
    return DbSchema(db_id=db_id, tables=database.read_tables(), foreign_keys=database.read_foreign_keys())


def refine_with_database(schema: DbSchema, db_file: PathLike) -> DbSchema:
    """
    Overlay declared types, PRIMARY KEY and NOT NULL from the database file onto a catalog schema

    Table and column order stay as in the catalog. Catalog tables the file lacks
    keep their catalog columns and add a warning.
    """
    declared = DbSchema(db_id=schema.db_id, tables=ShadowDatabase(db_file).read_tables())

    warnings = list(schema.warnings)
    tables = []
    for table in schema.tables:
        actual = declared.table(table.name)
        if actual is None:
            warnings.append(str(TableMissingInDbFile(f"{schema.db_id}: table {table.name!r} not in {db_file}")))
            tables.append(table)
            continue
        by_name = {column.name.lower(): column for column in actual.columns}
        columns = []
        for column in table.columns:
            match = by_name.get(column.name.lower())
            if match is None:
                columns.append(column)
            else:
                columns.append(replace(
                    column,
                    declared_type=match.declared_type or column.declared_type,
                    is_primary_key=match.is_primary_key or column.is_primary_key,
                    is_not_null=match.is_not_null,
                ))
        tables.append(Table(table.name, tuple(columns)))

    return DbSchema(db_id=schema.db_id, tables=tables, foreign_keys=list(schema.foreign_keys), warnings=warnings)


def describe_schema(schema: DbSchema,
                    options: Optional[DescribeOptions] = None,
                    db_file: Optional[PathLike] = None) -> SchemaDescription:
    """
    Render the schema description

    Each table becomes a block: a "Table: <name>" line followed by one
    "<name> <TYPE>[ PRIMARY KEY][ NOT NULL]" line per column. With samples,
    every column line is followed by "-- samples: v1, v2". Blocks are separated
    by a blank line.

    Raises:
        DatabaseUnreadable: samples requested and db_file missing or unreadable
    """
    options = options or DescribeOptions()
    database = None
    if options.include_samples:
        if db_file is None:
            raise DatabaseUnreadable(f"{schema.db_id}: samples requested but no database file given")
        database = ShadowDatabase(db_file)

    warnings = list(schema.warnings)
    blocks = []
    for table in schema.tables:
        lines = [f"Table: {table.name}"]
        # catalog and file may spell a table name with different case
        actual = database.find_table(table.name) if database is not None else None
        if database is not None and actual is None:
            warning = TableMissingInDbFile(f"{schema.db_id}: table {table.name!r} missing from database file, samples omitted")
            logger.warning("%s", warning)
            warnings.append(str(warning))

        for column in table.columns:
            lines.append(_column_line(column))
            if actual is not None:
                values = database.sample_values(actual, column.name, options.sample_count)
                if values:
                    lines.append("-- samples: " + ", ".join(_sample_text(v) for v in values))
        blocks.append("\n".join(lines))

    return SchemaDescription(
        db_id=schema.db_id,
        text="\n\n".join(blocks),
        included_samples=options.include_samples,
        sample_count=options.sample_count if options.include_samples else 0,
        warnings=tuple(warnings),
    )


def _column_line(column: Column) -> str:
    parts = [column.name]
    if column.declared_type:
        parts.append(column.declared_type)
    if column.is_primary_key:
        parts.append("PRIMARY KEY")
    if column.is_not_null:
        parts.append("NOT NULL")
    return " ".join(parts)


def _sample_text(value: Any) -> str:
    if isinstance(value, bytes):
        return f"<blob {len(value)} bytes>"
    # keep each sample on the column's line
    return " ".join(str(value).split())


def describe_databases(db_ids: Iterable[str],
                       schemas: Dict[str, DbSchema],
                       spider_root: Optional[PathLike],
                       options: Optional[DescribeOptions] = None,
                       types: str = "database") -> Dict[str, SchemaDescription]:
    """
    Descriptions for every database a dataset touches

    types="database" refines catalog schemas with the file's declared DDL when
    the file exists; types="catalog" renders the catalog as is. Databases absent
    from the catalog are introspected from their file.

    Raises:
        MissingDatabase: neither a catalog entry nor a database file exists
    """
    if types not in ("database", "catalog"):
        raise ValueError(f"unknown types source {types!r}")

    descriptions = {}
    for db_id in sorted(set(db_ids)):
        db_file = database_path(spider_root, db_id) if spider_root is not None else None
        has_file = db_file is not None and db_file.is_file()
        schema = schemas.get(db_id)
        if schema is None:
            if not has_file:
                raise MissingDatabase(db_id)
            schema = introspect_schema(db_id, db_file)
        elif types == "database" and has_file:
            schema = refine_with_database(schema, db_file)

        descriptions[db_id] = describe_schema(schema, options, db_file if has_file else None)
    return descriptions
