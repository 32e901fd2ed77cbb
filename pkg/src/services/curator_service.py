"""
    dataset curation service

    deterministic stratified sampling over scored examples: the curated training
    set, its train/validation split and the held-out benchmark. Datasets are
    written as one JSON object per line plus a manifest sidecar that records
    everything needed to rebuild them.

"""

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.database.models import ScoredExample
from src.errors import FormatError, InsufficientBucket, MissingField, SizeMismatch
from src.models.complexity import BUCKET_ORDER, DifficultyBucket

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RECORD_FIELDS = ("question", "gold_sql", "db_id", "score", "bucket")


def largest_remainder(weights: Dict[DifficultyBucket, float], total: int) -> Dict[DifficultyBucket, int]:
    """
    Apportion an integer total over buckets proportionally to weights

    floors first, then the leftover units go to the largest fractional parts;
    ties go to the bucket listed first in BUCKET_ORDER (Hard, Medium, Easy)
    """
    weight_sum = sum(weights.get(bucket, 0.0) for bucket in BUCKET_ORDER)
    if total == 0 or weight_sum <= 0:
        return {bucket: 0 for bucket in BUCKET_ORDER}

    quotas = {bucket: weights.get(bucket, 0.0) / weight_sum * total for bucket in BUCKET_ORDER}
    # the epsilon absorbs float error such as 0.4 * 5500 = 2199.9999999999995
    counts = {bucket: math.floor(quota + 1e-9) for bucket, quota in quotas.items()}
    leftover = total - sum(counts.values())

    ranked = sorted(BUCKET_ORDER, key=lambda b: (-(quotas[b] - counts[b]), BUCKET_ORDER.index(b)))
    for bucket in ranked[:max(leftover, 0)]:
        counts[bucket] += 1
    return counts


@dataclass(frozen=True)
class DistributionSpec:
    """
    target bucket mix

        hard, medium, easy: fractions summing to 1
        total: dataset size
    """
    hard: float = 0.4
    medium: float = 0.5
    easy: float = 0.1
    total: int = 600

    def __post_init__(self):
        if min(self.hard, self.medium, self.easy) < 0:
            raise ValueError("fractions must not be negative")
        if abs(self.hard + self.medium + self.easy - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")
        if self.total <= 0:
            raise ValueError("total must be positive")

    def fractions(self) -> Dict[DifficultyBucket, float]:
        return {
            DifficultyBucket.HARD: self.hard,
            DifficultyBucket.MEDIUM: self.medium,
            DifficultyBucket.EASY: self.easy,
        }

    def targets(self) -> Dict[DifficultyBucket, int]:
        return largest_remainder(self.fractions(), self.total)

    def to_dict(self) -> Dict[str, Any]:
        return {"hard": self.hard, "medium": self.medium, "easy": self.easy, "total": self.total}


@dataclass
class DatasetManifest:
    """
    provenance sidecar of a dataset file

        mode: scored, curated, passthrough, train, val or benchmark
        source_digest: sha256 of the file the items were drawn from
        extra: mode-specific details (exclusion counts, parent digests)
    """
    mode: str
    counts: Dict[str, int] = field(default_factory=dict)
    seed: Optional[int] = None
    weights: Optional[Dict[str, float]] = None
    thresholds: Optional[Dict[str, float]] = None
    distribution: Optional[Dict[str, Any]] = None
    source_digest: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "counts": dict(self.counts),
            "seed": self.seed,
            "weights": self.weights,
            "thresholds": self.thresholds,
            "distribution": self.distribution,
            "source_digest": self.source_digest,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        return cls(
            mode=data.get("mode", "unknown"),
            counts={k: int(v) for k, v in data.get("counts", {}).items()},
            seed=data.get("seed"),
            weights=data.get("weights"),
            thresholds=data.get("thresholds"),
            distribution=data.get("distribution"),
            source_digest=data.get("source_digest"),
            extra=dict(data.get("extra", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def bucket_counts(items: Iterable[ScoredExample]) -> Dict[str, int]:
    counts = {bucket.value: 0 for bucket in BUCKET_ORDER}
    for item in items:
        counts[item.bucket.value] += 1
    return counts


@dataclass
class CuratedDataset:
    items: List[ScoredExample]
    manifest: DatasetManifest

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.example.identity in seen:
                raise ValueError(f"duplicate example {item.example.identity}")
            seen.add(item.example.identity)

    @classmethod
    def create(cls, items: Sequence[ScoredExample], mode: str, **provenance: Any) -> "CuratedDataset":
        items = list(items)
        return cls(items=items, manifest=DatasetManifest(mode=mode, counts=bucket_counts(items), **provenance))

    def __len__(self) -> int:
        return len(self.items)

    def counts(self) -> Dict[str, int]:
        return bucket_counts(self.items)


def _provenance(parent: Optional[DatasetManifest]) -> Dict[str, Any]:
    if parent is None:
        return {}
    return {"weights": parent.weights, "thresholds": parent.thresholds, "source_digest": parent.source_digest}


def _by_bucket(items: Sequence[ScoredExample]) -> Dict[DifficultyBucket, List[ScoredExample]]:
    groups: Dict[DifficultyBucket, List[ScoredExample]] = defaultdict(list)
    for item in items:
        groups[item.bucket].append(item)
    return groups


def stratified_curate(pool: Sequence[ScoredExample],
                      spec: DistributionSpec,
                      seed: int,
                      provenance: Optional[DatasetManifest] = None,
                      mode: str = "curated") -> CuratedDataset:
    """
    Draw exactly spec.targets() examples per bucket

    Each bucket is shuffled with a generator seeded once per call, the first
    target-many are kept, and the concatenation is shuffled again so buckets
    interleave.

    Raises:
        InsufficientBucket: a bucket holds fewer examples than its target
    """
    targets = spec.targets()
    groups = _by_bucket(pool)
    for bucket in BUCKET_ORDER:
        available = len(groups.get(bucket, []))
        if available < targets[bucket]:
            raise InsufficientBucket(bucket.value, available, targets[bucket])

    rng = np.random.default_rng(seed)
    chosen: List[ScoredExample] = []
    for bucket in BUCKET_ORDER:
        candidates = groups.get(bucket, [])
        order = rng.permutation(len(candidates))
        chosen.extend(candidates[i] for i in order[:targets[bucket]])

    items = [chosen[i] for i in rng.permutation(len(chosen))]
    logger.info("curated %d examples (%s) with seed %d", len(items), bucket_counts(items), seed)
    return CuratedDataset.create(items, mode, seed=seed, distribution=spec.to_dict(), **_provenance(provenance))


def split_train_val(dataset: CuratedDataset,
                    train_count: int,
                    val_count: int,
                    seed: int) -> Tuple[CuratedDataset, CuratedDataset]:
    """
    Stratified split; each bucket is split in the train:val proportion

    both halves keep the input order

    Raises:
        SizeMismatch: counts are negative or do not add up to the dataset size
    """
    if train_count < 0 or val_count < 0 or train_count + val_count != len(dataset):
        raise SizeMismatch(f"train {train_count} + val {val_count} does not equal dataset size {len(dataset)}")

    positions: Dict[DifficultyBucket, List[int]] = defaultdict(list)
    for position, item in enumerate(dataset.items):
        positions[item.bucket].append(position)
    val_targets = largest_remainder({b: float(len(positions[b])) for b in BUCKET_ORDER}, val_count)

    rng = np.random.default_rng(seed)
    val_positions = set()
    for bucket in BUCKET_ORDER:
        members = positions[bucket]
        picked = rng.permutation(len(members))[:val_targets[bucket]]
        val_positions.update(members[i] for i in picked)

    train = [item for i, item in enumerate(dataset.items) if i not in val_positions]
    val = [item for i, item in enumerate(dataset.items) if i in val_positions]

    parent = dataset.manifest
    common = dict(_provenance(parent), seed=seed, distribution=parent.distribution,
                  extra={"parent_digest": parent.digest(), "train_count": train_count, "val_count": val_count})
    return CuratedDataset.create(train, "train", **common), CuratedDataset.create(val, "val", **common)


def build_benchmark(pool: Sequence[ScoredExample],
                    spec: DistributionSpec,
                    exclude: Optional[CuratedDataset],
                    seed: int,
                    provenance: Optional[DatasetManifest] = None) -> CuratedDataset:
    """
    Stratified benchmark disjoint from `exclude`

    An item is excluded when its (source, source_index) identity or its exact
    (question, gold_sql) pair occurs in `exclude`.
    """
    excluded_ids = set()
    excluded_pairs = set()
    if exclude is not None:
        for item in exclude.items:
            excluded_ids.add(item.example.identity)
            excluded_pairs.add((item.example.question, item.example.gold_sql))

    remaining = [
        item for item in pool
        if item.example.identity not in excluded_ids
        and (item.example.question, item.example.gold_sql) not in excluded_pairs
    ]
    logger.info("benchmark pool: %d of %d examples after exclusion", len(remaining), len(pool))

    dataset = stratified_curate(remaining, spec, seed, provenance, mode="benchmark")
    dataset.manifest.extra = {
        "excluded": len(pool) - len(remaining),
        "exclude_digest": exclude.manifest.digest() if exclude is not None else None,
    }
    return dataset


def passthrough_dataset(pool: Sequence[ScoredExample], provenance: Optional[DatasetManifest] = None) -> CuratedDataset:
    """The whole pool in its original order, for full-corpus training sets"""
    return CuratedDataset.create(pool, "passthrough", **_provenance(provenance))


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def dataset_lines(dataset: CuratedDataset) -> str:
    return "".join(json.dumps(item.to_record(), ensure_ascii=False) + "\n" for item in dataset.items)


def write_dataset(dataset: CuratedDataset, path: PathLike) -> Path:
    """Write the line records and the manifest sidecar; returns the sidecar path"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dataset_lines(dataset), encoding="utf-8")
    sidecar = manifest_path(path)
    sidecar.write_text(dataset.manifest.to_json(), encoding="utf-8")
    logger.info("wrote %d records to %s", len(dataset), path)
    return sidecar


def read_dataset(path: PathLike) -> CuratedDataset:
    """
    Read a dataset file and its manifest sidecar

    a missing sidecar yields a manifest with mode "unknown"

    Raises:
        FormatError: a line is not a JSON object (line index included)
        MissingField: a record lacks one of the record fields
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise FormatError(f"{path}: cannot read ({error.strerror or error})") from error

    items = []
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as error:
            raise FormatError(f"{path}: {error.msg}", index) from error
        if not isinstance(record, dict):
            raise FormatError(f"{path}: expected an object", index)
        for name in RECORD_FIELDS:
            if name not in record:
                raise MissingField(name, index)
        try:
            items.append(ScoredExample.from_record(record))
        except ValueError as error:
            raise FormatError(f"{path}: {error}", index) from error

    sidecar = manifest_path(path)
    if sidecar.is_file():
        manifest = DatasetManifest.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    else:
        manifest = DatasetManifest(mode="unknown", counts=bucket_counts(items))
    return CuratedDataset(items=items, manifest=manifest)


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
