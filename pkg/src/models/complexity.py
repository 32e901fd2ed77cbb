"""
Query complexity model

Recursive point score over JOIN / GROUP BY / ORDER BY / HAVING clauses and
nested selects, and the Easy / Medium / Hard bucketing on top of it.

score = w_join * joins + w_group_by * [GROUP BY] + w_order_by * [ORDER BY] + w_having * [HAVING]
        + sum over nested selects of (w_nesting + score(nested))

The optional extensions (LIMIT, DISTINCT, aggregate calls) default to 0 points.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict

from src.models.sql_model import ClauseInventory


class DifficultyBucket(str, Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"

    @classmethod
    def parse(cls, value: str) -> "DifficultyBucket":
        for bucket in cls:
            if bucket.value.lower() == str(value).strip().lower():
                return bucket
        raise ValueError(f"unknown difficulty bucket {value!r}")


# Hard first: curation and reports list buckets in this order
BUCKET_ORDER = (DifficultyBucket.HARD, DifficultyBucket.MEDIUM, DifficultyBucket.EASY)


@dataclass(frozen=True)
class WeightsConfig:
    """
    Points per clause

        w_join: per JOIN (comma joins included)
        w_group_by, w_order_by, w_having: per select node where the clause is present
        w_nesting: added per nested select, on top of that select's own score
        w_limit, w_distinct, w_aggregate: optional extensions, off by default
    """
    w_join: float = 1.0
    w_group_by: float = 1.0
    w_order_by: float = 1.0
    w_having: float = 1.0
    w_nesting: float = 1.0
    w_limit: float = 0.0
    w_distinct: float = 0.0
    w_aggregate: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must not be negative")

    def scaled(self, factor: float) -> "WeightsConfig":
        return WeightsConfig(**{name: value * factor for name, value in asdict(self).items()})

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WeightsConfig":
        return cls(**{key: float(value) for key, value in data.items()})


@dataclass(frozen=True)
class ThresholdsConfig:
    """
    Bucket boundaries

    score <= easy_max -> Easy, score <= medium_max -> Medium, otherwise Hard
    """
    easy_max: float = 1.0
    medium_max: float = 3.0

    def __post_init__(self):
        if self.easy_max < 0:
            raise ValueError("easy_max must not be negative")
        if self.easy_max >= self.medium_max:
            raise ValueError("easy_max must be below medium_max")

    def scaled(self, factor: float) -> "ThresholdsConfig":
        return ThresholdsConfig(easy_max=self.easy_max * factor, medium_max=self.medium_max * factor)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ThresholdsConfig":
        return cls(**{key: float(value) for key, value in data.items()})


class ComplexityCalculator:
    """
    Complexity scoring

    Stateless; both methods are pure functions of their arguments.
    """

    @staticmethod
    def score_query(inventory: ClauseInventory, weights: WeightsConfig = WeightsConfig()) -> float:
        """
        Recursive complexity score of one clause inventory

        Args:
            inventory: ClauseInventory of the root select
            weights: WeightsConfig, defaults to one point per clause and per nesting level

        Returns:
            non-negative score (an integer value with the default weights)
        """
        score = (
            weights.w_join * inventory.join_count
            + weights.w_group_by * inventory.has_group_by
            + weights.w_order_by * inventory.has_order_by
            + weights.w_having * inventory.has_having
            + weights.w_limit * inventory.has_limit
            + weights.w_distinct * inventory.has_distinct
            + weights.w_aggregate * inventory.aggregate_count
        )
        # each nested select adds one level plus its own score
        for sub in inventory.subqueries:
            score += weights.w_nesting + ComplexityCalculator.score_query(sub, weights)
        return float(score)

    @staticmethod
    def bucket(score: float, thresholds: ThresholdsConfig = ThresholdsConfig()) -> DifficultyBucket:
        if score < 0:
            raise ValueError("score must not be negative")
        if score <= thresholds.easy_max:
            return DifficultyBucket.EASY
        if score <= thresholds.medium_max:
            return DifficultyBucket.MEDIUM
        return DifficultyBucket.HARD
