"""
    corpus scoring service

    parses every gold query of a corpus, scores it with the complexity model and
    assigns a difficulty bucket. Also builds the per-bucket distribution summary
    (query count, score range, median score) printed after scoring.

"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import pandas as pd

from src.database.models import NlSqlExample, ScoredExample
from src.errors import SqlSyntaxError, UnsupportedStatement
from src.models.complexity import ComplexityCalculator, DifficultyBucket, ThresholdsConfig, WeightsConfig
from src.models.sql_model import ParseOptions, clause_inventory, parse_sql

logger = logging.getLogger(__name__)

# distribution tables list buckets easiest first
SUMMARY_ORDER = (DifficultyBucket.EASY, DifficultyBucket.MEDIUM, DifficultyBucket.HARD)


@dataclass(frozen=True)
class BucketStats:
    """
    statistics of one difficulty bucket

        min_score, max_score, median_score: None for an empty bucket
    """
    bucket: DifficultyBucket
    count: int
    min_score: Optional[float] = None
    max_score: Optional[float] = None
    median_score: Optional[float] = None


@dataclass(frozen=True)
class DistributionSummary:
    rows: Tuple[BucketStats, ...]

    @classmethod
    def from_scored(cls, scored: Iterable[ScoredExample]) -> "DistributionSummary":
        frame = pd.DataFrame(
            [(item.bucket.value, item.score) for item in scored],
            columns=["bucket", "score"],
        )
        stats = frame.groupby("bucket")["score"].agg(["count", "min", "max", "median"])

        rows = []
        for bucket in SUMMARY_ORDER:
            if bucket.value in stats.index:
                line = stats.loc[bucket.value]
                rows.append(BucketStats(
                    bucket=bucket,
                    count=int(line["count"]),
                    min_score=float(line["min"]),
                    max_score=float(line["max"]),
                    median_score=float(line["median"]),
                ))
            else:
                rows.append(BucketStats(bucket=bucket, count=0))
        return cls(rows=tuple(rows))

    def stats(self, bucket: DifficultyBucket) -> BucketStats:
        for row in self.rows:
            if row.bucket == bucket:
                return row
        raise KeyError(bucket)

    @property
    def total(self) -> int:
        return sum(row.count for row in self.rows)

    def to_frame(self) -> pd.DataFrame:
        """numeric form, one row per bucket"""
        return pd.DataFrame(
            [
                {
                    "bucket": row.bucket.value,
                    "count": row.count,
                    "min_score": row.min_score,
                    "max_score": row.max_score,
                    "median_score": row.median_score,
                }
                for row in self.rows
            ]
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    def render_table(self) -> str:
        """
        Text table with the columns Difficulty, Query Count, Complexity Score Range, Median Score

        e.g. "Medium | 2,800 | 2 (Min) -- 3 (Max) | 2.0"
        """
        header = ("Difficulty", "Query Count", "Complexity Score Range", "Median Score")
        lines = [header]
        for row in self.rows:
            if row.count:
                score_range = f"{_number(row.min_score)} (Min) -- {_number(row.max_score)} (Max)"
                median = f"{row.median_score:.1f}"
            else:
                score_range, median = "-", "-"
            lines.append((row.bucket.value, f"{row.count:,}", score_range, median))

        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            " | ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
            for line in lines
        )


@dataclass
class CorpusScore:
    """
    result of scoring a corpus

        scored: examples that parsed, in input order
        skipped: (example, reason) for examples whose gold SQL did not parse
    """
    scored: List[ScoredExample] = field(default_factory=list)
    skipped: List[Tuple[NlSqlExample, str]] = field(default_factory=list)

    @property
    def summary(self) -> DistributionSummary:
        return DistributionSummary.from_scored(self.scored)


class ScoringService:
    """
    Service for scoring corpora

    takes the calculator and scoring configuration by injection so that
    alternative weightings can be compared on the same corpus
    """

    def __init__(self, calculator: ComplexityCalculator = None,
                 weights: WeightsConfig = None,
                 thresholds: ThresholdsConfig = None,
                 parse_options: ParseOptions = None):

        self.calculator = calculator if calculator is not None else ComplexityCalculator()
        self.weights = weights if weights is not None else WeightsConfig()
        self.thresholds = thresholds if thresholds is not None else ThresholdsConfig()
        self.parse_options = parse_options if parse_options is not None else ParseOptions()

    def score_example(self, example: NlSqlExample) -> ScoredExample:
        """
        Score one example

        Raises:
            SqlSyntaxError, UnsupportedStatement: gold SQL is not a parseable SELECT
        """
        inventory = clause_inventory(parse_sql(example.gold_sql, self.parse_options))
        score = self.calculator.score_query(inventory, self.weights)
        return ScoredExample(
            example=example,
            score=score,
            bucket=self.calculator.bucket(score, self.thresholds),
            inventory=inventory,
        )

    def score_corpus(self, examples: Iterable[NlSqlExample]) -> CorpusScore:
        """
        Score every example; unparseable gold SQL is skipped and recorded, never fatal
        """
        result = CorpusScore()
        for example in examples:
            try:
                result.scored.append(self.score_example(example))
            except (SqlSyntaxError, UnsupportedStatement) as error:
                logger.warning("skipping %s: %s", example.key, error)
                result.skipped.append((example, f"{type(error).__name__}: {error}"))

        logger.info("scored %d examples, skipped %d", len(result.scored), len(result.skipped))
        return result


def _number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:g}"
