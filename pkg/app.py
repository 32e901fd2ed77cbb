"""
NL2SQL methodology toolkit

main file to run the toolkit
run with: python app.py <subcommand> [flags]

subcommands: score, curate, split, benchmark, describe, build-cot,
validate-cot, infer, evaluate, report
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml

from src.errors import FormatError, ToolkitError, UsageError
from src.models.complexity import ThresholdsConfig, WeightsConfig
from src.services.corpus_service import (
    DescribeOptions,
    database_path,
    describe_databases,
    load_examples,
    load_schemas,
)
from src.services.cot_service import (
    build_records,
    export_records,
    import_records,
    keys_path,
    validate_cot_record,
)
from src.services.curator_service import (
    CuratedDataset,
    DistributionSpec,
    build_benchmark,
    file_digest,
    passthrough_dataset,
    read_dataset,
    split_train_val,
    stratified_curate,
    write_dataset,
)
from src.services.evaluator_service import ComparisonSettings, ExecutionEvaluator
from src.services.gateway_service import EndpointConfig, GatewayService, PromptOptions, read_predictions
from src.services.report_service import FORMATS, RunLedger, render_comparison, render_figure_series
from src.services.scoring_service import ScoringService

logger = logging.getLogger("app")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# flags a subcommand cannot run without; checked after config files are merged
REQUIRED = {
    "score": ("input", "out"),
    "curate": ("input", "out"),
    "split": ("input", "train_out", "val_out", "train_count", "val_count"),
    "benchmark": ("input", "out"),
    "describe": ("tables", "db_id"),
    "build-cot": ("dataset", "tables", "traces", "out"),
    "validate-cot": ("records", "dataset", "spider_root"),
    "infer": ("dataset", "tables", "out"),
    "evaluate": ("predictions", "dataset", "spider_root", "out"),
    "report": ("ledger",),
}


class CliArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises UsageError instead of exiting"""

    def error(self, message: str):
        raise UsageError(message, usage=self.format_usage())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    common = CliArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file whose keys mirror the flags")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("-v", "--verbose", action="store_true", help="shorthand for --log-level INFO")
    return common


def _weights_flags(parser: argparse.ArgumentParser) -> None:
    defaults = WeightsConfig()
    for name, value in defaults.to_dict().items():
        parser.add_argument("--" + name.replace("_", "-"), dest=name, type=float, default=value)
    thresholds = ThresholdsConfig()
    parser.add_argument("--easy-max", type=float, default=thresholds.easy_max)
    parser.add_argument("--medium-max", type=float, default=thresholds.medium_max)


def _distribution_flags(parser: argparse.ArgumentParser, total: Optional[int]) -> None:
    spec = DistributionSpec()
    parser.add_argument("--total", type=int, default=total)
    parser.add_argument("--hard", type=float, default=spec.hard)
    parser.add_argument("--medium", type=float, default=spec.medium)
    parser.add_argument("--easy", type=float, default=spec.easy)
    parser.add_argument("--seed", type=int, default=0)


def _schema_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tables", help="Spider tables catalog (tables.json)")
    parser.add_argument("--spider-root", help="directory holding database/<db_id>/<db_id>.sqlite")
    parser.add_argument("--samples", type=int, default=0, help="sample values per column (0 disables)")
    parser.add_argument("--types", choices=["database", "catalog"], default="database",
                        help="column types from the database file DDL or from the catalog")


def build_parser():
    """Returns (parser, {subcommand: subparser})"""
    common = _common_flags()
    parser = CliArgumentParser(prog="app.py", description="NL2SQL methodology toolkit")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliArgumentParser)
    subparsers.required = True
    subs = {}

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text, parents=[common])
        subs[name] = sub
        return sub

    sub = add("score", "score a corpus and print its difficulty distribution")
    sub.add_argument("--in", dest="input")
    sub.add_argument("--out")
    sub.add_argument("--summary-out", help="distribution summary CSV")
    sub.add_argument("--skipped-out", help="JSONL of examples whose SQL did not parse")
    _weights_flags(sub)

    sub = add("curate", "draw a stratified training set from a scored corpus")
    sub.add_argument("--in", dest="input")
    sub.add_argument("--out")
    sub.add_argument("--mode", choices=["curated", "passthrough"], default="curated")
    _distribution_flags(sub, total=5500)

    sub = add("split", "stratified train/validation split")
    sub.add_argument("--in", dest="input")
    sub.add_argument("--train-out")
    sub.add_argument("--val-out")
    sub.add_argument("--train-count", type=int)
    sub.add_argument("--val-count", type=int)
    sub.add_argument("--seed", type=int, default=0)

    sub = add("benchmark", "draw the benchmark, disjoint from a training set")
    sub.add_argument("--in", dest="input", help="scored pool (normally the dev split)")
    sub.add_argument("--exclude", help="dataset whose items must not appear")
    sub.add_argument("--out")
    _distribution_flags(sub, total=600)

    sub = add("describe", "render a schema description")
    sub.add_argument("--db-id")
    sub.add_argument("--out")
    _schema_flags(sub)

    sub = add("build-cot", "assemble CoT records from reasoning traces")
    sub.add_argument("--dataset")
    sub.add_argument("--traces", help="prediction file produced by infer --prompt trace")
    sub.add_argument("--out")
    sub.add_argument("--answer", choices=["trace", "gold"], default="trace")
    _schema_flags(sub)

    sub = add("validate-cot", "validate CoT records by structure and execution")
    sub.add_argument("--records")
    sub.add_argument("--keys", help="key sidecar (defaults to <records>.keys.txt)")
    sub.add_argument("--dataset")
    sub.add_argument("--spider-root")
    sub.add_argument("--out", help="JSONL of validation results")
    sub.add_argument("--timeout", type=float, default=30.0)

    sub = add("infer", "run batch inference against a chat-completion endpoint")
    sub.add_argument("--dataset")
    sub.add_argument("--out")
    endpoint = EndpointConfig(base_url="-", model="-")
    sub.add_argument("--endpoint-config", help="YAML file with an endpoint: mapping of EndpointConfig fields")
    sub.add_argument("--base-url")
    sub.add_argument("--model")
    sub.add_argument("--token-env", default=None)
    sub.add_argument("--timeout", type=float, default=endpoint.timeout)
    sub.add_argument("--max-retries", type=int, default=endpoint.max_retries)
    sub.add_argument("--backoff-base", type=float, default=endpoint.backoff_base)
    sub.add_argument("--backoff-multiplier", type=float, default=endpoint.backoff_multiplier)
    sub.add_argument("--max-concurrent", type=int, default=endpoint.max_concurrent)
    sub.add_argument("--temperature", type=float, default=endpoint.temperature)
    sub.add_argument("--max-tokens", type=int, default=endpoint.max_tokens)
    sub.add_argument("--prompt", choices=["direct", "cot", "trace"], default="cot")
    sub.add_argument("--self-correction", action="store_true")
    sub.add_argument("--step-outline", action="store_true")
    sub.add_argument("--retry-failed", action="store_true")
    sub.add_argument("--progress", action="store_true")
    _schema_flags(sub)

    sub = add("evaluate", "execution accuracy of a prediction set")
    sub.add_argument("--predictions")
    sub.add_argument("--dataset")
    sub.add_argument("--spider-root")
    sub.add_argument("--out")
    sub.add_argument("--summary-out")
    settings = ComparisonSettings()
    sub.add_argument("--timeout", type=float, default=settings.timeout)
    sub.add_argument("--float-tol", type=float, default=settings.float_tol)
    sub.add_argument("--ignore-order", action="store_true")
    sub.add_argument("--set-semantics", action="store_true")
    sub.add_argument("--column-names", action="store_true")
    sub.add_argument("--top-complex", type=int, default=settings.top_complex)
    sub.add_argument("--workers", type=int, default=settings.workers)
    sub.add_argument("--progress", action="store_true")

    sub = add("report", "comparison table and figure series from a run ledger")
    sub.add_argument("--ledger")
    sub.add_argument("--format", choices=list(FORMATS), default="markdown")
    sub.add_argument("--out")
    sub.add_argument("--series-dir")

    return parser, subs


def load_config(path: str, command: str) -> Dict[str, Dict[str, Any]]:
    """
    Returns:
        {"defaults": {...}, "command": {...}} with keys normalized to flag dests
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as error:
        raise UsageError(f"cannot read config {path}: {error}") from error
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")

    def normalize(section: Any) -> Dict[str, Any]:
        if section is None:
            return {}
        if not isinstance(section, dict):
            raise UsageError(f"config {path}: sections must be mappings")
        # "in" is the --in flag, stored as "input"
        return {("input" if key == "in" else str(key).replace("-", "_")): value for key, value in section.items()}

    return {"defaults": normalize(data.get("defaults")), "command": normalize(data.get(command))}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    sub = subs[args.command]

    if args.config:
        config = load_config(args.config, args.command)
        overrides = {k: v for k, v in config["defaults"].items() if hasattr(args, k)}
        for key, value in config["command"].items():
            if not hasattr(args, key):
                raise UsageError(f"config {args.config}: unknown key {key!r} for {args.command}",
                                 usage=sub.format_usage())
            overrides[key] = value
        # flags given on the command line still win over file values
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)

    for dest in REQUIRED[args.command]:
        if getattr(args, dest, None) is None:
            flag = "--in" if dest == "input" else "--" + dest.replace("_", "-")
            raise UsageError(f"the following arguments are required: {flag}", usage=sub.format_usage())
    return args


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _describe_options(args: argparse.Namespace) -> DescribeOptions:
    if args.samples > 0:
        return DescribeOptions(include_samples=True, sample_count=args.samples)
    return DescribeOptions()


def _descriptions(args: argparse.Namespace, db_ids):
    schemas = load_schemas(args.tables)
    return describe_databases(db_ids, schemas, args.spider_root, _describe_options(args), args.types)


def cmd_score(args: argparse.Namespace) -> int:
    weights = WeightsConfig(**{name: getattr(args, name) for name in WeightsConfig().to_dict()})
    thresholds = ThresholdsConfig(easy_max=args.easy_max, medium_max=args.medium_max)
    service = ScoringService(weights=weights, thresholds=thresholds)

    result = service.score_corpus(load_examples(args.input))
    dataset = CuratedDataset.create(result.scored, "scored", weights=weights.to_dict(),
                                    thresholds=thresholds.to_dict(), source_digest=file_digest(args.input))
    write_dataset(dataset, args.out)

    summary = result.summary
    if args.summary_out:
        summary.to_csv(args.summary_out)
    if args.skipped_out:
        with open(args.skipped_out, "w", encoding="utf-8") as out:
            for example, reason in result.skipped:
                out.write(json.dumps({"key": example.key, "source_index": example.source_index,
                                      "db_id": example.db_id, "reason": reason}, ensure_ascii=False) + "\n")

    print(summary.render_table())
    print(f"\nScored {len(result.scored)} examples, skipped {len(result.skipped)}")
    return 0


def _spec(args: argparse.Namespace) -> DistributionSpec:
    return DistributionSpec(hard=args.hard, medium=args.medium, easy=args.easy, total=args.total)


def _print_counts(label: str, dataset: CuratedDataset) -> None:
    counts = ", ".join(f"{bucket} {count:,}" for bucket, count in dataset.counts().items())
    print(f"{label}: {len(dataset):,} examples ({counts})")


def cmd_curate(args: argparse.Namespace) -> int:
    pool = read_dataset(args.input)
    if args.mode == "passthrough":
        dataset = passthrough_dataset(pool.items, pool.manifest)
    else:
        dataset = stratified_curate(pool.items, _spec(args), args.seed, pool.manifest)
    write_dataset(dataset, args.out)
    _print_counts("Curated", dataset)
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.input)
    train, val = split_train_val(dataset, args.train_count, args.val_count, args.seed)
    write_dataset(train, args.train_out)
    write_dataset(val, args.val_out)
    _print_counts("Train", train)
    _print_counts("Val", val)
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    pool = read_dataset(args.input)
    exclude = read_dataset(args.exclude) if args.exclude else None
    dataset = build_benchmark(pool.items, _spec(args), exclude, args.seed, pool.manifest)
    write_dataset(dataset, args.out)
    _print_counts("Benchmark", dataset)
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    description = _descriptions(args, [args.db_id])[args.db_id]
    for warning in description.warnings:
        logger.warning("%s", warning)
    if args.out:
        Path(args.out).write_text(description.text + "\n", encoding="utf-8")
    else:
        print(description.text)
    return 0


def cmd_build_cot(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.dataset)
    traces = read_predictions(args.traces).raw_outputs()
    descriptions = _descriptions(args, [item.example.db_id for item in dataset.items])
    build = build_records(dataset.items, descriptions, traces, args.answer)

    export_records(build.records, args.out)
    keys_path(args.out).write_text("".join(key + "\n" for key in build.keys), encoding="utf-8")
    print(f"Built {len(build.records)} records, skipped {len(build.skipped)}")
    return 0


def cmd_validate_cot(args: argparse.Namespace) -> int:
    records = import_records(args.records)
    key_file = Path(args.keys) if args.keys else keys_path(args.records)
    try:
        keys = key_file.read_text(encoding="utf-8").split()
    except OSError as error:
        raise FormatError(f"{key_file}: cannot read record keys ({error.strerror or error})") from error
    if len(keys) != len(records):
        raise FormatError(f"{key_file}: {len(keys)} keys for {len(records)} records")

    examples = {item.example.key: item.example for item in read_dataset(args.dataset).items}
    settings = ComparisonSettings(timeout=args.timeout)
    results = []
    for key, record in zip(keys, records):
        if key not in examples:
            raise FormatError(f"record key {key!r} not in {args.dataset}")
        gold = examples[key]
        results.append((key, validate_cot_record(record, gold, database_path(args.spider_root, gold.db_id), settings)))

    if args.out:
        with open(args.out, "w", encoding="utf-8") as out:
            for key, result in results:
                out.write(json.dumps(dict(key=key, **result.to_dict()), ensure_ascii=False) + "\n")

    structural = sum(r.structural_ok for _, r in results)
    matched = sum(bool(r.execution_match) for _, r in results)
    print(f"Records: {len(results)}, structurally valid: {structural}, execution match: {matched}")
    return 0


def _endpoint(args: argparse.Namespace) -> EndpointConfig:
    """
    Endpoint settings from --endpoint-config, or from the flags alone

    With a file, only --base-url, --model and --token-env override it; the
    remaining endpoint flags have defaults and cannot tell "given" from "unset".
    """
    if args.endpoint_config:
        config = EndpointConfig.from_yaml(args.endpoint_config)
        given = {name: getattr(args, name) for name in ("base_url", "model", "token_env")}
        return replace(config, **{name: value for name, value in given.items() if value is not None})

    missing = [flag for flag, value in (("--base-url", args.base_url), ("--model", args.model)) if not value]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)} (or --endpoint-config)")
    return EndpointConfig(
        base_url=args.base_url, model=args.model, token_env=args.token_env, timeout=args.timeout,
        max_retries=args.max_retries, backoff_base=args.backoff_base,
        backoff_multiplier=args.backoff_multiplier, max_concurrent=args.max_concurrent,
        temperature=args.temperature, max_tokens=args.max_tokens,
    )


def cmd_infer(args: argparse.Namespace) -> int:
    config = _endpoint(args)
    dataset = read_dataset(args.dataset)
    options = PromptOptions(mode=args.prompt, self_correction=args.self_correction, step_outline=args.step_outline)
    descriptions = _descriptions(args, [item.example.db_id for item in dataset.items])

    predictions = GatewayService(config).run_batch(dataset.items, descriptions, args.out, options,
                                                   retry_failed=args.retry_failed, progress=args.progress)
    failed = sum(p.error is not None for p in predictions.predictions)
    print(f"Predictions: {len(predictions)}, transport failures: {failed}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    benchmark = read_dataset(args.dataset)
    predictions = read_predictions(args.predictions)
    settings = ComparisonSettings(
        float_tol=args.float_tol, respect_order_by=not args.ignore_order,
        duplicates_significant=not args.set_semantics, column_names_significant=args.column_names,
        timeout=args.timeout, top_complex=args.top_complex, workers=args.workers,
    )
    metadata = {"dataset_manifest_digest": benchmark.manifest.digest(),
                "predictions": predictions.metadata}

    report = ExecutionEvaluator(settings).evaluate(predictions.raw_outputs(), benchmark.items,
                                                   args.spider_root, metadata, progress=args.progress)
    report.write(args.out)
    text = report.summary_text()
    if args.summary_out:
        Path(args.summary_out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    ledger = RunLedger.load(args.ledger)
    table = render_comparison(ledger, args.format)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    if args.series_dir:
        for path in render_figure_series(ledger, args.series_dir):
            logger.info("wrote %s", path)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "score": cmd_score,
    "curate": cmd_curate,
    "split": cmd_split,
    "benchmark": cmd_benchmark,
    "describe": cmd_describe,
    "build-cot": cmd_build_cot,
    "validate-cot": cmd_validate_cot,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def configure_logging(args: argparse.Namespace) -> None:
    level = args.log_level or ("INFO" if args.verbose else "WARNING")
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(getattr(logging, level))


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as error:
        if error.usage:
            sys.stderr.write(error.usage)
        print(f"error: UsageError: {error}", file=sys.stderr)
        return 2

    configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as error:
        print(f"error: UsageError: {error}", file=sys.stderr)
        return 2
    except (ToolkitError, ValueError, OSError) as error:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
