"""
Tests for the run ledger, comparison tables and figure series
"""

import sys
from pathlib import Path

import pandas as pd
import pytest

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.errors import FormatError, MissingReport
from src.models.complexity import DifficultyBucket
from src.services.evaluator_service import EvaluationOutcome, EvaluationReport, Verdict
from src.services.report_service import COMPARISON_COLUMNS, RunLedger, render_comparison, render_figure_series


def write_report(path: Path, correct: int, mismatched: int, failed: int, bucket=DifficultyBucket.HARD):
    verdicts = [Verdict.CORRECT] * correct + [Verdict.RESULT_MISMATCH] * mismatched + [Verdict.EXECUTION_FAILED] * failed
    outcomes = [EvaluationOutcome(key=f"db#{i}", verdict=v, bucket=bucket, score=4.0) for i, v in enumerate(verdicts)]
    EvaluationReport(outcomes=outcomes).write(path)


@pytest.fixture
def ledger_file(tmp_path):
    """Two runs over 600 items: 217 correct (36.17%) and 327 correct (54.50%)"""
    reports = tmp_path / "reports"
    reports.mkdir()
    write_report(reports / "baseline.json", correct=217, mismatched=160, failed=223)
    write_report(reports / "tuned.json", correct=327, mismatched=167, failed=106)

    path = tmp_path / "runs.yaml"
    path.write_text(
        "runs:\n"
        "  - name: E1\n"
        "    model: small-base\n"
        "    method: Zero-shot\n"
        "    dataset: none\n"
        "    report: reports/baseline.json\n"
        "    group: small\n"
        "  - name: E2\n"
        "    model: small-base\n"
        "    method: SFT on CoT\n"
        "    dataset: curated_5k\n"
        "    dataset_size: 5000\n"
        "    report: reports/tuned.json\n"
        "    group: small\n"
    )
    return path


def test_markdown_table(ledger_file):
    """Header, separator and one row per run with two-decimal percentages"""

    print("\n=== Testing Comparison Table ===\n")

    text = render_comparison(RunLedger.load(ledger_file), "markdown")
    lines = text.strip().split("\n")

    print(text)

    assert lines[0] == "| " + " | ".join(COMPARISON_COLUMNS) + " |"
    assert lines[1].startswith("|---|")
    assert len(lines) == 4
    assert "| E1 | small-base | Zero-shot | none | 36.17% | n/a | n/a | 36.17% | 223 |" == lines[2]
    assert "54.50%" in lines[3] and lines[3].endswith("| 106 |")

    print("✓ Markdown table rendered")


def test_csv_and_latex(ledger_file):
    ledger = RunLedger.load(ledger_file)

    csv_lines = render_comparison(ledger, "csv").strip().split("\n")
    assert csv_lines[0] == ",".join(COMPARISON_COLUMNS)
    assert csv_lines[2] == "E2,small-base,SFT on CoT,curated_5k,54.50,n/a,n/a,54.50,106"

    latex = render_comparison(ledger, "latex")
    assert latex.startswith("\\begin{tabular}")
    assert "36.17\\%" in latex
    assert "curated\\_5k" in latex
    assert latex.rstrip().endswith("\\end{tabular}")

    with pytest.raises(ValueError):
        render_comparison(ledger, "html")


def test_figure_series(ledger_file, tmp_path):
    """One accuracy series per group plus the verdict breakdown"""

    written = render_figure_series(RunLedger.load(ledger_file), tmp_path / "series")
    names = [path.name for path in written]

    print(f"  written: {names}")

    assert names == ["accuracy_small.csv", "error_breakdown.csv"]
    accuracy = pd.read_csv(tmp_path / "series" / "accuracy_small.csv")
    assert list(accuracy["run"]) == ["E1", "E2"]
    assert list(accuracy["accuracy"]) == [36.17, 54.5]
    assert list(accuracy["top_complex"]) == [100.0, 100.0]

    breakdown = pd.read_csv(tmp_path / "series" / "error_breakdown.csv")
    failed = breakdown[(breakdown["run"] == "E1") & (breakdown["verdict"] == "EXECUTION_FAILED")]
    assert int(failed["count"].iloc[0]) == 223
    assert len(breakdown) == 2 * len(Verdict)


def test_missing_report(tmp_path):
    path = tmp_path / "runs.yaml"
    path.write_text("runs:\n  - {name: E9, model: m, method: x, dataset: d, report: nowhere.json}\n")
    with pytest.raises(MissingReport):
        render_comparison(RunLedger.load(path))


def test_ledger_validation(tmp_path):
    path = tmp_path / "runs.yaml"
    path.write_text("runs:\n  - {name: E1, model: m, method: x, dataset: d, report: a.json}\n"
                    "  - {name: E1, model: m, method: y, dataset: d, report: b.json}\n")
    with pytest.raises(FormatError):
        RunLedger.load(path)

    path.write_text("runs:\n  - {name: E1, model: m}\n")
    with pytest.raises(FormatError):
        RunLedger.load(path)


def test_empty_ledger(tmp_path):
    path = tmp_path / "runs.yaml"
    path.write_text("runs: []\n")
    lines = render_comparison(RunLedger.load(path)).strip().split("\n")
    assert len(lines) == 2


if __name__ == "__main__":
    print("Report tests need pytest fixtures; run: pytest tests/test_report.py -v")
