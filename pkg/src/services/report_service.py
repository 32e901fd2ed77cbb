"""
    comparison reports

    a run ledger names evaluated runs (model, training method, dataset and the
    evaluation report file). From it this service renders the comparative
    accuracy table and the CSV series behind the accuracy and error-breakdown
    figures.

"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import yaml

from src.errors import FormatError, MissingReport
from src.models.complexity import DifficultyBucket
from src.services.evaluator_service import EvaluationReport, Verdict, format_percent

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COMPARISON_COLUMNS = ("Exp ID", "Model", "Training Method", "Dataset", "Exec Acc",
                      "Easy", "Medium", "Hard", "Failures")
FORMATS = ("markdown", "csv", "latex")
# per-bucket columns follow the distribution table's Easy, Medium, Hard order
_BUCKETS = (DifficultyBucket.EASY, DifficultyBucket.MEDIUM, DifficultyBucket.HARD)


@dataclass(frozen=True)
class RunEntry:
    """
    one ledger row

        report: path of the evaluation report, relative to the ledger file
        group: figure series the run belongs to (e.g. large, small)
    """
    name: str
    model: str
    method: str
    dataset: str
    report: str
    dataset_size: Optional[int] = None
    hyperparameters: Optional[str] = None
    group: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any], index: int) -> "RunEntry":
        for name in ("name", "model", "method", "dataset", "report"):
            if name not in data:
                raise FormatError(f"run ledger: missing {name!r}", index)
        size = data.get("dataset_size")
        return cls(
            name=str(data["name"]),
            model=str(data["model"]),
            method=str(data["method"]),
            dataset=str(data["dataset"]),
            report=str(data["report"]),
            dataset_size=int(size) if size is not None else None,
            hyperparameters=data.get("hyperparameters"),
            group=data.get("group"),
        )


@dataclass
class RunLedger:
    runs: List[RunEntry] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        names = [run.name for run in self.runs]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise FormatError(f"run ledger: duplicate run names {', '.join(duplicates)}")

    @classmethod
    def load(cls, path: PathLike) -> "RunLedger":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as error:
            raise FormatError(f"{path}: cannot read run ledger ({error})") from error
        entries = data.get("runs", []) if isinstance(data, dict) else data
        if not isinstance(entries, list):
            raise FormatError(f"{path}: 'runs' must be a list")
        return cls(runs=[RunEntry.from_dict(entry, i) for i, entry in enumerate(entries)], base_dir=path.parent)

    def report_path(self, run: RunEntry) -> Path:
        path = Path(run.report)
        return path if path.is_absolute() else self.base_dir / path

    def load_report(self, run: RunEntry) -> EvaluationReport:
        path = self.report_path(run)
        if not path.is_file():
            raise MissingReport(run.name, str(path))
        return EvaluationReport.read(path)


def comparison_frame(ledger: RunLedger, percent_suffix: str = "%") -> pd.DataFrame:
    rows = []
    for run in ledger.runs:
        report = ledger.load_report(run)
        buckets = report.bucket_accuracy()
        rows.append([
            run.name,
            run.model,
            run.method,
            run.dataset,
            format_percent(report.accuracy, percent_suffix),
            *(format_percent(buckets[b.value]["accuracy"], percent_suffix) for b in _BUCKETS),
            str(report.failure_count),
        ])
    return pd.DataFrame(rows, columns=list(COMPARISON_COLUMNS))


def render_comparison(ledger: RunLedger, fmt: str = "markdown") -> str:
    """
    Table with one row per run in ledger order

        markdown: pipe table, percent cells like 54.50%
        csv: plain numbers like 54.50
        latex: tabular rows, percent cells like 54.50\\%

    Raises:
        MissingReport: a run's report file does not exist
    """
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {', '.join(FORMATS)}")

    if fmt == "csv":
        return comparison_frame(ledger, percent_suffix="").to_csv(index=False, lineterminator="\n")

    if fmt == "latex":
        frame = comparison_frame(ledger, percent_suffix="\\%")
        lines = ["\\begin{tabular}{" + "l" * 4 + "r" * 5 + "}", "\\hline",
                 " & ".join(COMPARISON_COLUMNS) + " \\\\", "\\hline"]
        lines += [" & ".join(_latex_escape(str(v)) for v in row) + " \\\\" for row in frame.itertuples(index=False)]
        lines += ["\\hline", "\\end{tabular}"]
        return "\n".join(lines) + "\n"

    frame = comparison_frame(ledger)
    lines = ["| " + " | ".join(COMPARISON_COLUMNS) + " |",
             "|" + "|".join("---" for _ in COMPARISON_COLUMNS) + "|"]
    lines += ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join(lines) + "\n"


def _latex_escape(text: str) -> str:
    # percent cells are already escaped
    if text.endswith("\\%"):
        return text
    for char in ("&", "%", "_", "#"):
        text = text.replace(char, "\\" + char)
    return text


def render_figure_series(ledger: RunLedger, out_dir: PathLike) -> List[Path]:
    """
    CSV series for the figures

        accuracy_<group>.csv: one row per run of the group (runs without a group go to "all")
        error_breakdown.csv: verdict counts per run

    Returns:
        written paths, sorted
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    groups: Dict[str, List[Dict[str, Any]]] = {}
    breakdown = []
    for run in ledger.runs:
        report = ledger.load_report(run)
        buckets = report.bucket_accuracy()
        row = {"run": run.name, "model": run.model, "method": run.method, "dataset": run.dataset,
               "accuracy": _percent_number(report.accuracy)}
        for bucket in _BUCKETS:
            row[bucket.value.lower()] = _percent_number(buckets[bucket.value]["accuracy"])
        row["top_complex"] = _percent_number(report.top_complex()["accuracy"])
        groups.setdefault(run.group or "all", []).append(row)

        counts = report.verdict_counts()
        for verdict in Verdict:
            breakdown.append({"run": run.name, "verdict": verdict.value, "count": counts[verdict.value]})

    written = []
    for group, rows in groups.items():
        path = out_dir / f"accuracy_{group}.csv"
        pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")
        written.append(path)

    path = out_dir / "error_breakdown.csv"
    pd.DataFrame(breakdown, columns=["run", "verdict", "count"]).to_csv(path, index=False, lineterminator="\n")
    written.append(path)
    logger.info("wrote %d figure series to %s", len(written), out_dir)
    return sorted(written)


def _percent_number(accuracy: Optional[float]) -> Optional[str]:
    return None if accuracy is None else f"{accuracy * 100:.2f}"
