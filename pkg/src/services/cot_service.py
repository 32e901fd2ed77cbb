"""
Chain-of-thought training records

Assembles three-message records (system instruction, schema and question,
reasoning followed by a fenced SQL answer), validates them by structure and by
executing the answer, and reads and writes the line-per-record envelope
{"messages": [{"role": ..., "content": ...}, ...]}.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from src.database.models import NlSqlExample, ScoredExample
from src.errors import (
    EmptyQuestion,
    EmptyReasoning,
    FormatError,
    GoldExecutionFailed,
    InvalidRecord,
    SchemaMismatch,
    SqlSyntaxError,
    ToolkitError,
    UnsupportedStatement,
)
from src.models.sql_model import parse_sql
from src.services.corpus_service import SchemaDescription
from src.services.evaluator_service import (
    ComparisonSettings,
    compare_results,
    execute_query,
    extract_sql,
    find_fences,
    gold_has_order_by,
    is_sql_tag,
    open_database,
    run_gold_query,
)
from src.services.prompts import COT_SYSTEM_PROMPT, QUESTION_PREFIX, SCHEMA_HEADER, ChatMessage, user_content

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ROLES = ("system", "user", "assistant")

STEP_LABELS = (
    "Query Analysis",
    "Table Selection",
    "Column Selection",
    "Logic & Join Strategy",
    "Self-Validation",
)

# heading or keyword forms each step tends to take in reasoning text
_STEP_PATTERNS = {
    "Query Analysis": re.compile(r"\b(query|question)\s+analysis\b|\banaly[sz]e\s+the\s+(query|question)\b", re.I),
    "Table Selection": re.compile(r"\btable\s+selection\b|\b(identify|select|choose)\s+the\s+(relevant\s+)?tables?\b", re.I),
    "Column Selection": re.compile(r"\bcolumn\s+selection\b|\b(identify|select|choose)\s+the\s+(relevant\s+|needed\s+)?columns?\b", re.I),
    "Logic & Join Strategy": re.compile(r"\b(logic|join)\s*(&|and)\s*(join|logic)\b|\bjoin\s+strategy\b|\bjoin\s+condition", re.I),
    "Self-Validation": re.compile(r"\bself[- ]validation\b|\b(verify|validate|double[- ]check)\b", re.I),
}


class CotFailure(str, Enum):
    WRONG_ROLES = "WRONG_ROLES"
    MISSING_SCHEMA_HEADER = "MISSING_SCHEMA_HEADER"
    MISSING_QUESTION = "MISSING_QUESTION"
    MISSING_SQL_FENCE = "MISSING_SQL_FENCE"
    UNPARSEABLE_SQL = "UNPARSEABLE_SQL"
    GOLD_FAILED = "GOLD_FAILED"
    EXECUTION_FAILED = "EXECUTION_FAILED"
    RESULT_MISMATCH = "RESULT_MISMATCH"


@dataclass(frozen=True)
class CotRecord:
    messages: Tuple[ChatMessage, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"messages": [m.to_dict() for m in self.messages]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CotRecord":
        return cls(messages=tuple(ChatMessage.from_dict(m) for m in data["messages"]))

    def content(self, role: str) -> str:
        for message in self.messages:
            if message.role == role:
                return message.content
        return ""

    def structural_problems(self) -> List[CotFailure]:
        if tuple(m.role for m in self.messages) != ROLES:
            return [CotFailure.WRONG_ROLES]
        problems = []
        user = self.content("user")
        if SCHEMA_HEADER not in user:
            problems.append(CotFailure.MISSING_SCHEMA_HEADER)
        if QUESTION_PREFIX.strip() not in user:
            problems.append(CotFailure.MISSING_QUESTION)
        if not any(tag == "sql" for tag, _, _ in find_fences(self.content("assistant"))):
            problems.append(CotFailure.MISSING_SQL_FENCE)
        return problems


@dataclass(frozen=True)
class StepCoverage:
    """
        detected: step labels found in the reasoning, in canonical order
        taxonomy: "five-step" (all five), "four-step" (all but Self-Validation) or "partial"
    """
    detected: Tuple[str, ...] = ()
    taxonomy: str = "partial"

    @property
    def missing(self) -> Tuple[str, ...]:
        return tuple(label for label in STEP_LABELS if label not in self.detected)


@dataclass(frozen=True)
class CotValidationResult:
    structural_ok: bool
    extracted_sql: Optional[str] = None
    execution_match: Optional[bool] = None
    step_coverage: StepCoverage = StepCoverage()
    failure_reason: Optional[CotFailure] = None
    detail: str = ""
    warnings: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "structural_ok": self.structural_ok,
            "extracted_sql": self.extracted_sql,
            "execution_match": self.execution_match,
            "step_coverage": list(self.step_coverage.detected),
            "taxonomy": self.step_coverage.taxonomy,
            "failure_reason": self.failure_reason.value if self.failure_reason else None,
            "detail": self.detail,
            "warnings": list(self.warnings),
        }


def detect_steps(reasoning: str) -> StepCoverage:
    detected = tuple(label for label in STEP_LABELS if _STEP_PATTERNS[label].search(reasoning or ""))
    if len(detected) == len(STEP_LABELS):
        taxonomy = "five-step"
    elif set(STEP_LABELS[:4]) <= set(detected):
        taxonomy = "four-step"
    else:
        taxonomy = "partial"
    return StepCoverage(detected=detected, taxonomy=taxonomy)


def _check_context(example: NlSqlExample, description: SchemaDescription) -> None:
    if description.db_id != example.db_id:
        raise SchemaMismatch(f"description for {description.db_id!r} used with {example.db_id!r}")
    if not example.question or not example.question.strip():
        raise EmptyQuestion(f"{example.key}: question is empty")


def build_teacher_prompt(example: NlSqlExample,
                         description: SchemaDescription,
                         system_prompt: str = COT_SYSTEM_PROMPT) -> List[ChatMessage]:
    """
    System and user messages sent to a reasoning model to obtain a reasoning trace

    Raises:
        SchemaMismatch: the description belongs to another database
        EmptyQuestion: the question is blank
    """
    _check_context(example, description)
    return [
        ChatMessage("system", system_prompt),
        ChatMessage("user", user_content(description.text, example.question)),
    ]


def assemble_cot_record(example: NlSqlExample,
                        description: SchemaDescription,
                        reasoning: str,
                        final_sql: str,
                        system_prompt: str = COT_SYSTEM_PROMPT) -> CotRecord:
    """
    Raises:
        EmptyReasoning: reasoning is blank
        SqlSyntaxError, UnsupportedStatement: final_sql is not a parseable SELECT
    """
    if not reasoning or not reasoning.strip():
        raise EmptyReasoning(f"{example.key}: reasoning is empty")
    final_sql = final_sql.strip()
    parse_sql(final_sql)

    prompt = build_teacher_prompt(example, description, system_prompt)
    answer = reasoning.strip() + "\n\n```sql\n" + final_sql + "\n```"
    return CotRecord(messages=tuple(prompt) + (ChatMessage("assistant", answer),))


def split_trace_response(raw_output: str) -> Tuple[str, str]:
    """
    (reasoning, sql) of a traced answer: the last SQL-tagged fence (```sql, ```sqlite, ...)
    is the answer, everything before it is the reasoning
    """
    fences = [(tag, body, start) for tag, body, start in find_fences(raw_output) if tag and is_sql_tag(tag)]
    if not fences:
        return (raw_output or "").strip(), ""
    _, body, start = fences[-1]
    return raw_output[:start].strip(), body.strip()


def validate_cot_record(record: CotRecord,
                        gold: NlSqlExample,
                        db_file: PathLike,
                        settings: ComparisonSettings = None) -> CotValidationResult:
    """
    Structural checks, then execution of the record's answer against the gold query

    A gold query that fails to run leaves the record unjudged (GOLD_FAILED); it
    is reported, not raised. Missing reasoning steps only produce warnings.

    Raises:
        DatabaseUnreadable: db_file missing or not a database
    """
    settings = settings or ComparisonSettings()
    # raises DatabaseUnreadable before any query runs
    open_database(db_file)

    coverage = detect_steps(split_trace_response(record.content("assistant"))[0])
    warnings = [f"reasoning lacks step: {label}" for label in coverage.missing]

    problems = record.structural_problems()
    if problems:
        return CotValidationResult(structural_ok=False, step_coverage=coverage, failure_reason=problems[0],
                                   detail=", ".join(p.value for p in problems), warnings=tuple(warnings))

    sql = extract_sql(record.content("assistant"))
    try:
        parse_sql(sql)
    except (SqlSyntaxError, UnsupportedStatement) as error:
        return CotValidationResult(structural_ok=True, extracted_sql=sql, step_coverage=coverage,
                                   failure_reason=CotFailure.UNPARSEABLE_SQL, detail=str(error),
                                   warnings=tuple(warnings))

    try:
        gold_result = run_gold_query(db_file, gold.gold_sql, settings.timeout)
    except GoldExecutionFailed as error:
        logger.warning("%s: gold query failed, record not judged: %s", gold.key, error)
        return CotValidationResult(structural_ok=True, extracted_sql=sql, step_coverage=coverage,
                                   failure_reason=CotFailure.GOLD_FAILED, detail=str(error),
                                   warnings=tuple(warnings))
    try:
        result = execute_query(db_file, sql, settings.timeout)
    except ToolkitError as error:
        return CotValidationResult(structural_ok=True, extracted_sql=sql, execution_match=False,
                                   step_coverage=coverage, failure_reason=CotFailure.EXECUTION_FAILED,
                                   detail=str(error), warnings=tuple(warnings))

    ordered = settings.respect_order_by and gold_has_order_by(gold.gold_sql)
    match = compare_results(gold_result, result, ordered, settings=settings)
    if match and not gold_result.rows:
        warnings.append("both queries return no rows; the match carries little signal")
        logger.warning("%s: empty-result match", gold.key)
    return CotValidationResult(
        structural_ok=True,
        extracted_sql=sql,
        execution_match=match,
        step_coverage=coverage,
        failure_reason=None if match else CotFailure.RESULT_MISMATCH,
        warnings=tuple(warnings),
    )


def export_records(records: Sequence[CotRecord], path: PathLike) -> None:
    """
    One {"messages": [...]} object per line

    Raises:
        InvalidRecord: a record fails the structural checks; nothing is written
    """
    for index, record in enumerate(records):
        problems = record.structural_problems()
        if problems:
            raise InvalidRecord(f"record {index}: {', '.join(p.value for p in problems)}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as out:
        for record in records:
            out.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    logger.info("exported %d records to %s", len(records), path)


def import_records(path: PathLike) -> List[CotRecord]:
    path = Path(path)
    records = []
    for index, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            records.append(CotRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as error:
            raise FormatError(f"{path}: not a messages record ({error})", index) from error
    return records


def keys_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".keys.txt")


@dataclass
class CotBuild:
    records: List[CotRecord] = field(default_factory=list)
    keys: List[str] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def build_records(items: Sequence[ScoredExample],
                  descriptions: Dict[str, SchemaDescription],
                  traces: Dict[str, str],
                  answer: str = "trace") -> CotBuild:
    """
    Records from reasoning traces

    answer="trace" keeps the trace's own final SQL, answer="gold" replaces it
    with the gold query. Items without a usable trace are skipped and listed.
    """
    if answer not in ("trace", "gold"):
        raise ValueError("answer must be 'trace' or 'gold'")

    build = CotBuild()
    for item in items:
        key = item.example.key
        raw = traces.get(key, "")
        reasoning, traced_sql = split_trace_response(raw)
        final_sql = item.example.gold_sql if answer == "gold" else traced_sql
        try:
            record = assemble_cot_record(item.example, descriptions[item.example.db_id], reasoning, final_sql)
        except (ToolkitError, KeyError) as error:
            build.skipped.append((key, f"{type(error).__name__}: {error}"))
            continue
        build.records.append(record)
        build.keys.append(key)

    if build.skipped:
        logger.warning("skipped %d of %d items without a usable trace", len(build.skipped), len(items))
    return build
