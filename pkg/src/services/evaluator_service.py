"""
    execution accuracy evaluation

    extracts the final SQL from each model output, runs gold and predicted SQL
    against the read-only database file and compares the two result sets.
    The per-item verdicts roll up into overall, per-bucket and hardest-N accuracy.

"""

import json
import logging
import math
import re
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from tqdm import tqdm

from src.database.db_manager import ShadowDatabase
from src.database.models import ResultTable, ScoredExample
from src.errors import (
    ExecError,
    FormatError,
    GoldExecutionFailed,
    IncompletePredictions,
    MissingDatabase,
    QueryTimeout,
    SqlSyntaxError,
    ToolkitError,
    UnsupportedStatement,
    WriteAttempt,
)
from src.models.complexity import BUCKET_ORDER, DifficultyBucket
from src.models.sql_model import parse_sql
from src.services.corpus_service import database_path

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# the closing fence may be missing at the end of the text
_FENCE = re.compile(r"```(.*?)(?:```|\Z)", re.DOTALL)
# language tag: a word on the opening line by itself, or "sql" followed by inline code
_TAG_LINE = re.compile(r"[ \t]*([A-Za-z0-9_+-]+)[ \t]*\r?\n")
_INLINE_SQL = re.compile(r"[ \t]*(sql)\s", re.IGNORECASE)
_ORDER_BY = re.compile(r"\border\s+by\b", re.IGNORECASE)

# fence tags models use for SQL besides "sql" itself; any tag starting with "sql" also counts
SQL_DIALECT_TAGS = frozenset({
    "sqlite", "sqlite3", "mysql", "mariadb", "postgres", "postgresql", "psql", "pgsql",
    "plsql", "tsql", "mssql", "oracle", "duckdb", "hive", "sparksql",
})


class Verdict(str, Enum):
    CORRECT = "CORRECT"
    RESULT_MISMATCH = "RESULT_MISMATCH"
    EXECUTION_FAILED = "EXECUTION_FAILED"
    GOLD_FAILED = "GOLD_FAILED"
    TIMEOUT = "TIMEOUT"
    EXTRACTION_FAILED = "EXTRACTION_FAILED"


FAILURE_VERDICTS = (Verdict.EXECUTION_FAILED, Verdict.EXTRACTION_FAILED, Verdict.TIMEOUT)


@dataclass(frozen=True)
class ComparisonSettings:
    """
    result-set comparison conventions

        float_tol / abs_tol: numeric cells match within math.isclose(rel_tol, abs_tol)
        respect_order_by: compare as sequences when the gold query orders its output
        duplicates_significant: multiset (True) or set (False) semantics
        column_names_significant: also require equal column names (case-insensitive)
        timeout: seconds per statement
        top_complex: size of the hardest-N accuracy slice
        workers: evaluation threads
    """
    float_tol: float = 1e-6
    abs_tol: float = 1e-9
    respect_order_by: bool = True
    duplicates_significant: bool = True
    column_names_significant: bool = False
    timeout: float = 30.0
    top_complex: int = 40
    workers: int = 1

    def __post_init__(self):
        if self.float_tol < 0 or self.abs_tol < 0:
            raise ValueError("tolerances must not be negative")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def find_fences(text: str) -> List[Tuple[str, str, int]]:
    """(tag, body, start offset) of every fenced block, in order; the tag is lowercased"""
    fences = []
    for match in _FENCE.finditer(text or ""):
        inner = match.group(1)
        tag = _TAG_LINE.match(inner) or _INLINE_SQL.match(inner)
        if tag is None:
            fences.append(("", inner, match.start()))
        else:
            fences.append((tag.group(1).lower(), inner[tag.end():], match.start()))
    return fences


def is_sql_tag(tag: str) -> bool:
    """True for "sql", "sql-server" style tags and the dialect names in SQL_DIALECT_TAGS"""
    return tag.startswith("sql") or tag in SQL_DIALECT_TAGS


def extract_sql(raw_output: str) -> str:
    """
    Final SQL of a model output

    the last fence tagged sql (or with a SQL dialect name such as sqlite),
    else the last untagged fence, else the whole text;
    "" when nothing usable remains
    """
    if not raw_output:
        return ""
    fences = find_fences(raw_output)

    # any SQL-tagged fence outranks the untagged ones, wherever it appears
    tagged = [body for tag, body, _ in fences if tag and is_sql_tag(tag)]
    if tagged:
        return tagged[-1].strip()
    untagged = [body for tag, body, _ in fences if not tag]
    if untagged:
        return untagged[-1].strip()

    if fences:
        # only fences tagged with another language (python, json, ...)
        return ""
    return raw_output.strip()


def execute_query(db_file: PathLike, sql: str, timeout: float = 30.0) -> ResultTable:
    """
    Run one SELECT against a database file opened read-only

    Raises:
        WriteAttempt: the text is anything other than a single SELECT
        ExecError: engine error (message preserved)
        QueryTimeout: statement ran past the timeout
        DatabaseUnreadable: the file cannot be opened as a database
    """
    try:
        parse_sql(sql)
    except UnsupportedStatement as error:
        raise WriteAttempt(str(error)) from error
    except SqlSyntaxError:
        # the engine produces the authoritative error message
        pass
    return ShadowDatabase(db_file).execute(sql, timeout)


def run_gold_query(db_file: PathLike, sql: str, timeout: float = 30.0) -> ResultTable:
    """
    Run a gold query; its failures are the benchmark's fault, not the model's

    Raises:
        GoldExecutionFailed: the gold SQL errored, timed out or was not a SELECT
        DatabaseUnreadable: the file itself cannot be opened (never folded into a gold failure)
    """
    try:
        return execute_query(db_file, sql, timeout)
    except (ExecError, QueryTimeout, WriteAttempt) as error:
        raise GoldExecutionFailed(f"{type(error).__name__}: {error}") from error


def open_database(db_file: PathLike) -> ShadowDatabase:
    """
    Open a database file once before any query runs on it

    Raises:
        DatabaseUnreadable: missing, corrupt or not a SQLite file
    """
    database = ShadowDatabase(db_file)
    # a connection is only attempted here; the constructor just checks the path
    database.table_names()
    return database


def gold_has_order_by(sql: str) -> bool:
    try:
        return parse_sql(sql).has_order_by
    except ToolkitError:
        return bool(_ORDER_BY.search(sql))


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _cells_equal(a: Any, b: Any, settings: ComparisonSettings) -> bool:
    # NULL only equals NULL
    if a is None or b is None:
        return a is None and b is None
    if _is_number(a) and _is_number(b):
        # isclose: |a - b| <= max(rel_tol * max(|a|, |b|), abs_tol)
        return math.isclose(a, b, rel_tol=settings.float_tol, abs_tol=settings.abs_tol)
    # 1 and "1" differ
    if _is_number(a) or _is_number(b):
        return False
    return a == b


def _rows_equal(a: Sequence[Any], b: Sequence[Any], settings: ComparisonSettings) -> bool:
    return all(_cells_equal(x, y, settings) for x, y in zip(a, b))


def _split_row(row: Sequence[Any]) -> Tuple[tuple, tuple]:
    """(signature of the non-numeric cells and numeric positions, numeric values)"""
    signature = tuple(("#",) if _is_number(v) else (type(v).__name__, v) for v in row)
    numbers = tuple(v for v in row if _is_number(v))
    return signature, numbers


def _numbers_match(gold: List[tuple], pred: List[tuple], settings: ComparisonSettings) -> bool:
    # sorted pairing settles the common case of exact or near-exact numbers
    gold, pred = sorted(gold), sorted(pred)
    if all(_rows_equal(g, p, settings) for g, p in zip(gold, pred)):
        return True
    if not gold or not gold[0]:
        return False

    # tolerance matching: candidates must have a first number within the tolerance window
    firsts = [p[0] for p in pred]
    used = [False] * len(pred)
    for g in gold:
        # bisect finds the sorted slice of candidates whose first number is close enough
        margin = 2 * settings.float_tol * abs(g[0]) + settings.abs_tol
        lo, hi = bisect_left(firsts, g[0] - margin), bisect_right(firsts, g[0] + margin)
        for j in range(lo, hi):
            if not used[j] and _rows_equal(g, pred[j], settings):
                used[j] = True
                break
        else:
            return False
    return True


def _multiset_equal(gold_rows: List[tuple], pred_rows: List[tuple], settings: ComparisonSettings) -> bool:
    # rows group by their exact non-numeric cells; numbers are matched within a group
    gold_groups: Dict[tuple, List[tuple]] = defaultdict(list)
    pred_groups: Dict[tuple, List[tuple]] = defaultdict(list)
    for row in gold_rows:
        signature, numbers = _split_row(row)
        gold_groups[signature].append(numbers)
    for row in pred_rows:
        signature, numbers = _split_row(row)
        pred_groups[signature].append(numbers)

    if gold_groups.keys() != pred_groups.keys():
        return False
    for signature, gold in gold_groups.items():
        pred = pred_groups[signature]
        if len(gold) != len(pred) or not _numbers_match(gold, pred, settings):
            return False
    return True


def compare_results(gold: ResultTable,
                    pred: ResultTable,
                    gold_has_order_by: bool,
                    float_tol: float = 1e-6,
                    settings: Optional[ComparisonSettings] = None) -> bool:
    """
    Result-set equivalence

    Column order counts, column names do not (unless settings say so). Rows are
    compared as sequences when gold_has_order_by, otherwise as multisets.
    """
    settings = settings or ComparisonSettings(float_tol=float_tol)
    if gold.arity != pred.arity:
        return False
    if settings.column_names_significant and [c.lower() for c in gold.columns] != [c.lower() for c in pred.columns]:
        return False

    gold_rows, pred_rows = list(gold.rows), list(pred.rows)
    if not settings.duplicates_significant:
        # dict.fromkeys drops repeats and keeps first-seen order
        gold_rows, pred_rows = list(dict.fromkeys(gold_rows)), list(dict.fromkeys(pred_rows))
    if len(gold_rows) != len(pred_rows):
        return False

    if gold_has_order_by:
        # row i must match row i
        return all(_rows_equal(g, p, settings) for g, p in zip(gold_rows, pred_rows))
    return _multiset_equal(gold_rows, pred_rows, settings)


@dataclass(frozen=True)
class EvaluationOutcome:
    key: str
    verdict: Verdict
    detail: str = ""
    bucket: DifficultyBucket = DifficultyBucket.EASY
    score: float = 0.0
    gold_sql: str = ""
    predicted_sql: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "verdict": self.verdict.value,
            "detail": self.detail,
            "bucket": self.bucket.value,
            "score": self.score,
            "gold_sql": self.gold_sql,
            "predicted_sql": self.predicted_sql,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvaluationOutcome":
        return cls(
            key=data["key"],
            verdict=Verdict(data["verdict"]),
            detail=data.get("detail", ""),
            bucket=DifficultyBucket.parse(data["bucket"]),
            score=float(data.get("score", 0.0)),
            gold_sql=data.get("gold_sql", ""),
            predicted_sql=data.get("predicted_sql", ""),
        )


def _ratio(correct: int, denominator: int) -> Optional[float]:
    return correct / denominator if denominator else None


@dataclass
class EvaluationReport:
    """
    Per-item outcomes in benchmark order plus run metadata

    accuracy = CORRECT / (total - GOLD_FAILED); every rollup is derived from outcomes
    """
    outcomes: List[EvaluationOutcome] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.outcomes)

    def verdict_counts(self) -> Dict[str, int]:
        counts = Counter(outcome.verdict for outcome in self.outcomes)
        return {verdict.value: counts.get(verdict, 0) for verdict in Verdict}

    @staticmethod
    def _tally(outcomes: Sequence[EvaluationOutcome]) -> Tuple[int, int]:
        judged = [o for o in outcomes if o.verdict != Verdict.GOLD_FAILED]
        return sum(o.verdict == Verdict.CORRECT for o in judged), len(judged)

    @property
    def correct(self) -> int:
        return self._tally(self.outcomes)[0]

    @property
    def denominator(self) -> int:
        return self._tally(self.outcomes)[1]

    @property
    def accuracy(self) -> Optional[float]:
        return _ratio(*self._tally(self.outcomes))

    @property
    def failure_count(self) -> int:
        return sum(o.verdict in FAILURE_VERDICTS for o in self.outcomes)

    @property
    def gold_failed(self) -> int:
        return sum(o.verdict == Verdict.GOLD_FAILED for o in self.outcomes)

    def bucket_accuracy(self) -> Dict[str, Dict[str, Any]]:
        rollup = {}
        for bucket in BUCKET_ORDER:
            correct, denominator = self._tally([o for o in self.outcomes if o.bucket == bucket])
            rollup[bucket.value] = {"correct": correct, "denominator": denominator,
                                    "accuracy": _ratio(correct, denominator)}
        return rollup

    def top_complex(self, n: Optional[int] = None) -> Dict[str, Any]:
        """Accuracy over the n highest-scoring items, ties broken by benchmark order"""
        if n is None:
            n = int(self.metadata.get("settings", {}).get("top_complex", 40))
        # highest score first; the index keeps ties in benchmark order
        ranked = sorted(range(len(self.outcomes)), key=lambda i: (-self.outcomes[i].score, i))[:n]
        correct, denominator = self._tally([self.outcomes[i] for i in ranked])
        return {"n": n, "correct": correct, "denominator": denominator, "accuracy": _ratio(correct, denominator)}

    def summary(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "correct": self.correct,
            "denominator": self.denominator,
            "accuracy": self.accuracy,
            "gold_failed": self.gold_failed,
            "failure_count": self.failure_count,
            "verdicts": self.verdict_counts(),
            "buckets": self.bucket_accuracy(),
            "top_complex": self.top_complex(),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "summary": self.summary(),
            "metadata": self.metadata,
            "items": [outcome.to_dict() for outcome in self.outcomes],
        }

    def write(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: PathLike) -> "EvaluationReport":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            outcomes = [EvaluationOutcome.from_dict(item) for item in data["items"]]
        except (OSError, ValueError, KeyError, TypeError) as error:
            raise FormatError(f"{path}: not an evaluation report ({error})") from error
        return cls(outcomes=outcomes, metadata=data.get("metadata", {}))

    def summary_text(self) -> str:
        """human-readable table: overall, per bucket and hardest-N rows"""
        rows = [("Overall", self.correct, self.denominator, self.accuracy)]
        for bucket, stats in self.bucket_accuracy().items():
            rows.append((bucket, stats["correct"], stats["denominator"], stats["accuracy"]))
        top = self.top_complex()
        rows.append((f"Top {top['n']} complex", top["correct"], top["denominator"], top["accuracy"]))

        frame = pd.DataFrame(
            [(name, correct, denominator, format_percent(accuracy)) for name, correct, denominator, accuracy in rows],
            columns=["Slice", "Correct", "Judged", "Exec Acc"],
        )
        verdicts = ", ".join(f"{name}={count}" for name, count in self.verdict_counts().items())
        return f"{frame.to_string(index=False)}\n\nFailures: {self.failure_count}\nVerdicts: {verdicts}"


def format_percent(accuracy: Optional[float], suffix: str = "%") -> str:
    if accuracy is None:
        return "n/a"
    return f"{accuracy * 100:.2f}{suffix}"


class ExecutionEvaluator:
    """
    Service for evaluating a prediction set against a benchmark

    database files are located under spider_root with the benchmark's
    <root>/database/<db_id>/<db_id>.sqlite layout
    """

    def __init__(self, settings: ComparisonSettings = None):

        self.settings = settings if settings is not None else ComparisonSettings()

    def evaluate(self,
                 predictions: Dict[str, str],
                 benchmark: Sequence[ScoredExample],
                 spider_root: PathLike,
                 metadata: Optional[Dict[str, Any]] = None,
                 progress: bool = False) -> EvaluationReport:
        """
        Evaluate every benchmark item

        Args:
            predictions: key -> raw model output (a transport failure is an empty string)
            benchmark: items in benchmark order
            spider_root: directory holding database/<db_id>/<db_id>.sqlite

        Raises:
            IncompletePredictions: some benchmark keys have no prediction
            MissingDatabase: a referenced database file does not exist
            DatabaseUnreadable: a referenced database file is corrupt or not SQLite
        """
        # every benchmark item needs an answer, even an empty one
        missing = [item.example.key for item in benchmark if item.example.key not in predictions]
        if missing:
            raise IncompletePredictions(f"{len(missing)} benchmark items lack a prediction (first: {missing[0]})")

        db_files = {}
        for item in benchmark:
            db_id = item.example.db_id
            if db_id not in db_files:
                db_files[db_id] = database_path(spider_root, db_id)
                if not db_files[db_id].is_file():
                    raise MissingDatabase(db_id)
                # raises DatabaseUnreadable for a corrupt or non-SQLite file
                open_database(db_files[db_id])

        def judge(item: ScoredExample) -> EvaluationOutcome:
            return self.evaluate_item(item, predictions[item.example.key], db_files[item.example.db_id])

        # pool.map yields results in input order, whatever order they finish in
        with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
            outcomes = list(tqdm(pool.map(judge, benchmark), total=len(benchmark),
                                 disable=not progress, desc="evaluate"))

        report = EvaluationReport(outcomes=outcomes, metadata=dict(metadata or {}))
        report.metadata["settings"] = self.settings.to_dict()
        logger.info("evaluated %d items: %d correct of %d judged", report.total, report.correct, report.denominator)
        return report

    def evaluate_item(self, item: ScoredExample, raw_output: str, db_file: PathLike) -> EvaluationOutcome:
        """extract -> gold -> prediction -> compare"""
        example = item.example
        predicted = extract_sql(raw_output)
        base = dict(key=example.key, bucket=item.bucket, score=item.score,
                    gold_sql=example.gold_sql, predicted_sql=predicted)
        # empty output (a transport failure) or only non-SQL fences
        if not predicted:
            return EvaluationOutcome(verdict=Verdict.EXTRACTION_FAILED, detail="no SQL in model output", **base)

        timeout = self.settings.timeout
        try:
            gold = run_gold_query(db_file, example.gold_sql, timeout)
        except GoldExecutionFailed as error:
            # the item leaves the denominator; the model is not blamed for a broken gold query
            logger.warning("gold query of %s failed: %s", example.key, error)
            return EvaluationOutcome(verdict=Verdict.GOLD_FAILED, detail=str(error), **base)

        try:
            result = execute_query(db_file, predicted, timeout)
        except QueryTimeout as error:
            return EvaluationOutcome(verdict=Verdict.TIMEOUT, detail=str(error), **base)
        except (ExecError, WriteAttempt) as error:
            return EvaluationOutcome(verdict=Verdict.EXECUTION_FAILED, detail=f"{type(error).__name__}: {error}", **base)

        ordered = self.settings.respect_order_by and gold_has_order_by(example.gold_sql)
        if compare_results(gold, result, ordered, settings=self.settings):
            return EvaluationOutcome(verdict=Verdict.CORRECT, **base)
        return EvaluationOutcome(verdict=Verdict.RESULT_MISMATCH,
                                 detail=f"{len(gold.rows)} gold rows vs {len(result.rows)} predicted", **base)
