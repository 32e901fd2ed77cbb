"""
SQL model

Parses benchmark SQL (SQLite dialect, the subset found in Spider gold queries)
into a small tree of select nodes and extracts the clause inventory that
complexity scoring works from.

Tokenizing and grammar are delegated to sqlglot. This module only keeps the
parts of sqlglot's tree that scoring and evaluation care about; everything
else is kept as rendered SQL text (opaque expressions carry no score).
"""

import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Tuple

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, SqlglotError

from src.errors import SqlSyntaxError, UnsupportedStatement

# Intersect/Except subclass Union in older sqlglot releases, so order matters in _set_operator
SET_OPERATIONS = (exp.Union, exp.Intersect, exp.Except)
QUERY_NODES = (exp.Select,) + SET_OPERATIONS

_LEADING_NOISE = re.compile(r"(?:\s+|--[^\n]*(?:\n|$)|/\*.*?\*/)*", re.DOTALL)
_WORD = re.compile(r"[A-Za-z_]+")
_QUERY_KEYWORDS = {"SELECT", "WITH"}
_STATEMENT_KEYWORDS = {
    "INSERT", "UPDATE", "DELETE", "REPLACE", "UPSERT", "MERGE", "CREATE", "DROP",
    "ALTER", "TRUNCATE", "PRAGMA", "ATTACH", "DETACH", "VACUUM", "REINDEX",
    "ANALYZE", "BEGIN", "COMMIT", "END", "ROLLBACK", "SAVEPOINT", "RELEASE",
    "EXPLAIN", "GRANT", "REVOKE", "VALUES", "USE", "SET", "SHOW", "DESCRIBE",
}


@dataclass(frozen=True)
class ParseOptions:
    """
    parser settings

        dialect: sqlglot dialect name; the benchmark databases are SQLite files
    """
    dialect: str = "sqlite"


@dataclass(frozen=True)
class Source:
    """
    One FROM entry: the leading table or a joined one

        name: table name, or the alias of a derived table
        join: None for the leading entry, otherwise the join keyword ("JOIN", "LEFT JOIN", ...).
              comma joins read as "JOIN" on recent sqlglot releases
        condition: rendered ON / USING clause
        derived: True when the entry is a subquery (the subquery itself lives in
                 SelectNode.subqueries, so the tree stays a tree)
    """
    name: str
    alias: Optional[str] = None
    join: Optional[str] = None
    condition: Optional[str] = None
    derived: bool = False


@dataclass(frozen=True)
class NestedQuery:
    position: str  # SELECT / FROM / WHERE / GROUP BY / HAVING / ORDER BY / WITH
    node: "SelectNode"


@dataclass(frozen=True)
class SetArm:
    operator: str  # UNION / UNION ALL / INTERSECT / EXCEPT
    node: "SelectNode"


@dataclass(frozen=True)
class SelectNode:
    """
    A single SELECT block

    Set-operation chains are flattened: the first arm is the node itself and
    arms 2..n hang off set_operations in order. ORDER BY / LIMIT written after
    the last arm apply to the whole chain and live in compound_order_by /
    compound_limit of the first arm.
    """
    projections: Tuple[str, ...] = ()
    sources: Tuple[Source, ...] = ()
    where: Optional[str] = None
    group_by: Tuple[str, ...] = ()
    having: Optional[str] = None
    order_by: Tuple[str, ...] = ()
    limit: Optional[str] = None
    distinct: bool = False
    aggregate_count: int = 0
    subqueries: Tuple[NestedQuery, ...] = ()
    set_operations: Tuple[SetArm, ...] = ()
    compound_order_by: Tuple[str, ...] = ()
    compound_limit: Optional[str] = None

    @property
    def join_count(self) -> int:
        # n FROM entries, however they are spelled, make n - 1 joins
        return max(len(self.sources) - 1, 0)

    def children(self) -> Iterator["SelectNode"]:
        for nested in self.subqueries:
            yield nested.node
        for arm in self.set_operations:
            yield arm.node

    def walk(self) -> Iterator["SelectNode"]:
        yield self
        for child in self.children():
            yield from child.walk()


@dataclass(frozen=True)
class QueryAst:
    """
    Parsed query

    Equality is structural (the select-node tree); the sqlglot expression is
    carried along for serialization only.
    """
    root: SelectNode
    dialect: str = "sqlite"
    expression: Optional[exp.Expression] = field(default=None, compare=False, repr=False)

    def to_sql(self) -> str:
        """Re-serialize in the parse dialect"""
        return self.expression.sql(dialect=self.dialect)

    @property
    def has_order_by(self) -> bool:
        """ORDER BY on the outermost result (ignores ordering inside subqueries)"""
        if self.root.order_by or self.root.compound_order_by:
            return True
        # some dialect versions leave a trailing ORDER BY on the last set arm
        arms = self.root.set_operations
        return bool(arms and arms[-1].node.order_by)


@dataclass(frozen=True)
class ClauseInventory:
    """
    Scoring-relevant clause counts for one select node

    subqueries holds one inventory per immediate child select: subqueries in
    any position first, then set-operation arms 2..n.
    """
    join_count: int = 0
    has_group_by: bool = False
    has_order_by: bool = False
    has_having: bool = False
    subqueries: Tuple["ClauseInventory", ...] = ()
    has_limit: bool = False
    has_distinct: bool = False
    aggregate_count: int = 0

    def __post_init__(self):
        if self.join_count < 0:
            raise ValueError("join_count must not be negative")
        if self.aggregate_count < 0:
            raise ValueError("aggregate_count must not be negative")

    @property
    def nested_count(self) -> int:
        """Number of nested selects at any depth"""
        return sum(1 + sub.nested_count for sub in self.subqueries)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "join_count": self.join_count,
            "has_group_by": self.has_group_by,
            "has_order_by": self.has_order_by,
            "has_having": self.has_having,
            "has_limit": self.has_limit,
            "has_distinct": self.has_distinct,
            "aggregate_count": self.aggregate_count,
            "subqueries": [sub.to_dict() for sub in self.subqueries],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClauseInventory":
        return cls(
            join_count=int(data.get("join_count", 0)),
            has_group_by=bool(data.get("has_group_by", False)),
            has_order_by=bool(data.get("has_order_by", False)),
            has_having=bool(data.get("has_having", False)),
            has_limit=bool(data.get("has_limit", False)),
            has_distinct=bool(data.get("has_distinct", False)),
            aggregate_count=int(data.get("aggregate_count", 0)),
            subqueries=tuple(cls.from_dict(sub) for sub in data.get("subqueries", [])),
        )


def parse_sql(text: str, options: Optional[ParseOptions] = None) -> QueryAst:
    """
    Parse one SELECT statement

    Args:
        text: SQL text; a trailing semicolon is allowed
        options: ParseOptions, defaults to the SQLite dialect

    Returns:
        QueryAst

    Raises:
        SqlSyntaxError: malformed SQL (position + message)
        UnsupportedStatement: INSERT/UPDATE/DDL or more than one statement
    """
    options = options or ParseOptions()
    if text is None or not text.strip():
        raise SqlSyntaxError("empty SQL text", 0)

    _check_statement_start(text)

    try:
        statements = [s for s in sqlglot.parse(text, read=options.dialect) if s is not None]
    except ParseError as error:
        detail = error.errors[0] if getattr(error, "errors", None) else {}
        raise SqlSyntaxError(
            detail.get("description") or str(error),
            _offset(text, detail.get("line"), detail.get("col")),
            detail.get("highlight") or "",
        ) from error
    except SqlglotError as error:
        # tokenizer failures (unterminated strings, stray characters)
        raise SqlSyntaxError(str(error), 0) from error

    if not statements:
        raise SqlSyntaxError("no statement found", 0)
    if len(statements) > 1:
        raise UnsupportedStatement("only a single SELECT statement is supported")

    statement = _unwrap(statements[0])
    if not isinstance(statement, QUERY_NODES):
        raise UnsupportedStatement(f"{type(statement).__name__} statements are not supported; only SELECT")

    root = _TreeBuilder(options.dialect).build_query(statement)
    return QueryAst(root=root, dialect=options.dialect, expression=statements[0])


def clause_inventory(ast: QueryAst) -> ClauseInventory:
    """Clause inventory of the root select, recursing into every nested select"""
    return _inventory(ast.root)


def _inventory(node: SelectNode) -> ClauseInventory:
    return ClauseInventory(
        join_count=node.join_count,
        has_group_by=bool(node.group_by),
        has_order_by=bool(node.order_by or node.compound_order_by),
        has_having=node.having is not None,
        subqueries=tuple(_inventory(child) for child in node.children()),
        has_limit=bool(node.limit or node.compound_limit),
        has_distinct=node.distinct,
        aggregate_count=node.aggregate_count,
    )


class _TreeBuilder:
    """Turns a sqlglot expression into SelectNode trees"""

    def __init__(self, dialect: str):
        self.dialect = dialect

    def _sql(self, node: exp.Expression) -> str:
        return node.sql(dialect=self.dialect)

    def build_query(self, node: exp.Expression) -> SelectNode:
        node = _unwrap(node)
        if isinstance(node, SET_OPERATIONS):
            return self._build_compound(node)
        if isinstance(node, exp.Select):
            return self._build_select(node)
        # parseable query shapes we do not model (VALUES, table functions) stay opaque
        return SelectNode(projections=(self._sql(node),))

    def _build_compound(self, node: exp.Expression) -> SelectNode:
        # sqlglot nests chains to the left: ((A UNION B) UNION C)
        trailing: List[Tuple[str, exp.Expression]] = []
        current = node
        while isinstance(current, SET_OPERATIONS):
            trailing.append((_set_operator(current), current.expression))
            current = _unwrap(current.this)
        trailing.reverse()

        first = self.build_query(current)
        arms = tuple(SetArm(operator, self.build_query(arm)) for operator, arm in trailing)

        order = node.args.get("order")
        return replace(
            first,
            set_operations=first.set_operations + arms,
            compound_order_by=tuple(self._sql(o) for o in order.expressions) if order is not None else (),
            compound_limit=self._limit_text(node),
        )

    def _build_select(self, select: exp.Select) -> SelectNode:
        nested: List[NestedQuery] = []

        def collect(position: str, expression: Optional[exp.Expression]) -> None:
            if expression is None:
                return
            for query in _nested_queries(expression):
                nested.append(NestedQuery(position, self.build_query(query)))

        collect("WITH", select.args.get("with") or select.args.get("with_"))

        for projection in select.expressions:
            collect("SELECT", projection)

        sources: List[Source] = []
        from_ = select.args.get("from") or select.args.get("from_")
        if from_ is not None:
            # recent sqlglot keeps the first table in `this` and comma tables as joins,
            # older releases list every comma table in `expressions`
            entries = [from_.args.get("this")] + list(from_.args.get("expressions") or [])
            for entry in entries:
                if entry is not None:
                    collect("FROM", entry)
                    sources.append(self._source(entry))

        for join in select.args.get("joins") or []:
            collect("FROM", join)
            sources.append(self._source(join.this, join=self._join_label(join), condition=self._join_condition(join)))

        where = select.args.get("where")
        collect("WHERE", where)
        group = select.args.get("group")
        collect("GROUP BY", group)
        having = select.args.get("having")
        collect("HAVING", having)
        order = select.args.get("order")
        collect("ORDER BY", order)

        return SelectNode(
            projections=tuple(self._sql(p) for p in select.expressions),
            sources=tuple(sources),
            where=self._sql(where.this) if where is not None else None,
            group_by=tuple(self._sql(g) for g in group.expressions) if group is not None else (),
            having=self._sql(having.this) if having is not None else None,
            order_by=tuple(self._sql(o) for o in order.expressions) if order is not None else (),
            limit=self._limit_text(select),
            distinct=bool(select.args.get("distinct")),
            aggregate_count=sum(1 for n in _local_descendants(select) if isinstance(n, exp.AggFunc)),
            subqueries=tuple(nested),
        )

    def _source(self, entry: exp.Expression, join: Optional[str] = None,
                condition: Optional[str] = None) -> Source:
        alias = entry.alias or None
        if isinstance(entry, exp.Subquery):
            return Source(name=alias or "", alias=alias, join=join, condition=condition, derived=True)
        if isinstance(entry, exp.Table):
            return Source(name=entry.name, alias=alias, join=join, condition=condition)
        return Source(name=self._sql(entry), alias=alias, join=join, condition=condition)

    @staticmethod
    def _join_label(join: exp.Join) -> str:
        words = [join.text(key).upper() for key in ("method", "side", "kind")]
        return " ".join([w for w in words if w] + ["JOIN"])

    def _join_condition(self, join: exp.Join) -> Optional[str]:
        on = join.args.get("on")
        if on is not None:
            return self._sql(on)
        using = join.args.get("using")
        if using:
            return "USING (" + ", ".join(self._sql(u) for u in using) + ")"
        return None

    def _limit_text(self, node: exp.Expression) -> Optional[str]:
        parts = [self._sql(node.args[key]) for key in ("limit", "offset") if node.args.get(key) is not None]
        return " ".join(parts) or None


def _set_operator(node: exp.Expression) -> str:
    if isinstance(node, exp.Intersect):
        operator = "INTERSECT"
    elif isinstance(node, exp.Except):
        operator = "EXCEPT"
    else:
        operator = "UNION"
    if node.args.get("distinct") is False:
        operator += " ALL"
    return operator


def _unwrap(node: exp.Expression) -> exp.Expression:
    """Strip parentheses / subquery wrappers around a query"""
    while isinstance(node, (exp.Subquery, exp.Paren)) and isinstance(
        node.this, (exp.Subquery, exp.Paren) + QUERY_NODES
    ):
        node = node.this
    return node


def _child_expressions(node: exp.Expression) -> Iterator[exp.Expression]:
    for value in node.args.values():
        if isinstance(value, exp.Expression):
            yield value
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, exp.Expression):
                    yield item


def _nested_queries(node: exp.Expression) -> Iterator[exp.Expression]:
    """Outermost query nodes below `node` (does not descend into them)"""
    if isinstance(node, QUERY_NODES):
        yield node
        return
    for child in _child_expressions(node):
        yield from _nested_queries(child)


def _local_descendants(node: exp.Expression) -> Iterator[exp.Expression]:
    """Descendants that belong to this select block, nested queries excluded"""
    for child in _child_expressions(node):
        if isinstance(child, QUERY_NODES):
            continue
        yield child
        yield from _local_descendants(child)


def _check_statement_start(text: str) -> None:
    position = _LEADING_NOISE.match(text).end()
    # compound queries may open with a parenthesized arm
    while position < len(text) and text[position] in "( \t\r\n":
        position += 1

    match = _WORD.match(text, position)
    if match is None:
        raise SqlSyntaxError("expected SELECT", position, text[position:position + 1])

    word = match.group(0).upper()
    if word in _QUERY_KEYWORDS:
        return
    if word in _STATEMENT_KEYWORDS:
        raise UnsupportedStatement(f"{word} statements are not supported; only SELECT")
    raise SqlSyntaxError(f"unexpected token {match.group(0)!r}, expected SELECT", match.start(), match.group(0))


def _offset(text: str, line: Optional[int], col: Optional[int]) -> int:
    """sqlglot reports 1-based line/column; convert to a character offset"""
    if not line:
        return 0
    lines = text.split("\n")
    offset = sum(len(l) + 1 for l in lines[: max(line - 1, 0)])
    return min(offset + max((col or 1) - 1, 0), len(text))
