#!/usr/bin/env python3
"""
Command-line entry point for the forecasting pipeline.

    python scripts/cli.py gen-synthetic --out data
    python scripts/cli.py prepare
    python scripts/cli.py backtest
    python scripts/cli.py train
    python scripts/cli.py forecast
    python scripts/cli.py quantiles
    python scripts/cli.py evaluate --file runs/run-.../forecast-split_1.csv --start-day 673

Every command reads one YAML config (--config, default config/pipeline.yaml)
plus ``--set section.key=value`` overrides and writes its outputs under
runs/run-<config hash>/ together with a manifest.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure. A
failure also prints one ``ERROR <kind> <message>`` line to stderr.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from data_ingest import PanelDataset, build_panel, load_inputs
from errors import ForecastingError, SchemaMismatchError, ValidationError
from features import FeatureBuilder, FeatureCache, FeatureSet, load_feature_specs
from forecast import (ENSEMBLE, FittedPipeline, backtest, forecast_all_groups, full_train,
                      make_splits, read_forecast_csv, run_split)
from hierarchy import build_hierarchy, compute_weights
from metrics import QUANTILES, HierarchicalScorer
from reporting import BacktestReporter, EvaluationReporter, run_directory, write_manifest
from settings import DEFAULT_CONFIG_PATH, HORIZON, VERSION, PipelineConfig, load_config
from synthetic import write_panel
from uncertainty import (FactorProblem, QuantileFactorTable, assemble_submission,
                         optimize_factors, probabilistic_forecast, read_quantile_submission)

logger = logging.getLogger(__name__)

# Configuration
REPO_ROOT = Path(__file__).resolve().parent.parent
PIPELINE_FILE = "pipeline.joblib"
FORECAST_FILE = "forecast.csv"
MEDIAN_FILE = "median.csv"
QUANTILE_FILE = "quantiles.csv"


def _resolve(path: str) -> Path:
    """Relative paths are tried against the working directory, then the repo root."""
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists():
        return candidate
    fallback = REPO_ROOT / candidate
    return fallback if fallback.exists() else candidate


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.deterministic:
        overrides.append("deterministic=true")
    if args.strict_split_ranges:
        overrides.append("splits.strict_ranges=true")
    return overrides


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    path = Path(args.config) if args.config else DEFAULT_CONFIG_PATH
    return load_config(path, _overrides(args))


def _load_panel(config: PipelineConfig) -> PanelDataset:
    print("🔍 Loading sales, calendar and prices...")
    sales, calendar, prices = load_inputs(_resolve(config.data.sales), _resolve(config.data.calendar),
                                          _resolve(config.data.prices), jobs=config.workers)
    panel = build_panel(sales, calendar, prices)
    print(f"  {panel.n_series_level12} series x {panel.n_days} days")
    return panel


def _feature_set(config: PipelineConfig) -> FeatureSet:
    return load_feature_specs(_resolve(config.features_path))


def _cache(config: PipelineConfig) -> FeatureCache:
    return FeatureCache(Path(config.output_dir) / "cache")


def _splits(config: PipelineConfig, panel: PanelDataset, use: Optional[List[int]] = None):
    splits = make_splits(panel.n_days, config.splits.strict_ranges, use or config.splits.use)
    if not splits:
        raise ValidationError(f"a {panel.n_days}-day panel is too short for any validation split")
    return splits


def cmd_gen_synthetic(args: argparse.Namespace, config: PipelineConfig) -> int:
    print("🧪 Generating synthetic M5-format data...")
    paths = write_panel(config.synthetic, Path(args.out))
    for name, path in paths.items():
        print(f"  {name}: {path}")
    print("✅ Synthetic data written")
    return 0


def cmd_prepare(args: argparse.Namespace, config: PipelineConfig) -> int:
    panel = _load_panel(config)
    index = build_hierarchy(panel)
    feature_set = _feature_set(config)
    run_dir = run_directory(config)
    cache = _cache(config)

    weights = compute_weights(panel, index, panel.n_days)
    outputs = {"weights": weights.to_csv(run_dir / "weights.csv")}

    print("🧱 Building feature matrices...")
    ranges = [(s.name, s.train_days) for s in _splits(config, panel)] + [("full", (1, panel.n_days))]
    for name, (first, last) in ranges:
        builder = FeatureBuilder(panel, feature_set, (first, last))
        matrix = builder.training_matrix(first, last, cache)
        print(f"  {name}: {len(matrix)} rows x {matrix.n_features} features")

    print(f"📊 Cache: {cache.hits} hit(s), {cache.misses} miss(es)")
    write_manifest(run_dir, config, "prepare", outputs)
    print(f"✅ Prepared run directory {run_dir}")
    return 0


def cmd_backtest(args: argparse.Namespace, config: PipelineConfig) -> int:
    panel = _load_panel(config)
    index = build_hierarchy(panel)
    run_dir = run_directory(config)
    splits = _splits(config, panel)

    print(f"🏋️ Backtesting {len(splits)} split(s) with groups "
          f"{', '.join(g.name for g in config.enabled_groups())}...")
    result = backtest(config, panel, index, _feature_set(config), splits, _cache(config))

    outputs = {}
    table = result.score_table()
    table.to_csv(run_dir / "backtest-scores.csv", float_format="%.17g")
    outputs["scores"] = run_dir / "backtest-scores.csv"
    result.per_level().to_csv(run_dir / "backtest-levels.csv", index=False, float_format="%.17g")
    outputs["levels"] = run_dir / "backtest-levels.csv"
    for split_result in result.splits:
        name = split_result.split.name
        outputs[f"forecast-{name}"] = split_result.forecast.accuracy.to_csv(run_dir / f"forecast-{name}.csv")

    reporter = BacktestReporter(result, config)
    outputs["report"] = reporter.save_report(run_dir)
    write_manifest(run_dir, config, "backtest", outputs)

    print()
    print("📊 Mean WRMSSE:")
    for name, value in table.loc["mean"].items():
        marker = "⭐" if name == ENSEMBLE else " "
        print(f"  {marker} {name}: {value:.5f}")
    print()
    print(f"📄 Full report: {outputs['report']}")
    return 0


def cmd_train(args: argparse.Namespace, config: PipelineConfig) -> int:
    panel = _load_panel(config)
    run_dir = run_directory(config)
    print("🏋️ Training every group on all observed days...")
    pipeline, _ = full_train(config, panel, _feature_set(config), _cache(config))
    path = pipeline.save(run_dir / PIPELINE_FILE)
    write_manifest(run_dir, config, "train", {"pipeline": path})
    print(f"✅ Saved fitted pipeline to {path}")
    return 0


def _fitted_pipeline(config: PipelineConfig, panel: PanelDataset, feature_set: FeatureSet,
                     run_dir: Path) -> FittedPipeline:
    path = run_dir / PIPELINE_FILE
    if not path.exists():
        print("  No fitted pipeline in the run directory; training one now")
        pipeline, _ = full_train(config, panel, feature_set, _cache(config))
        pipeline.save(path)
        return pipeline
    pipeline = FittedPipeline.load(path)
    if pipeline.schema_hash != feature_set.schema_hash:
        raise SchemaMismatchError(f"{path} was fitted on feature schema {pipeline.schema_hash}, "
                                  f"config now gives {feature_set.schema_hash}")
    if pipeline.train_end != panel.n_days:
        raise SchemaMismatchError(f"{path} was trained through d_{pipeline.train_end}, "
                                  f"panel ends at d_{panel.n_days}")
    return pipeline


def cmd_forecast(args: argparse.Namespace, config: PipelineConfig) -> int:
    panel = _load_panel(config)
    feature_set = _feature_set(config)
    run_dir = run_directory(config)
    pipeline = _fitted_pipeline(config, panel, feature_set, run_dir)

    start_day = panel.n_days + 1
    print(f"🔮 Forecasting d_{start_day}..d_{start_day + HORIZON - 1}...")
    builder = FeatureBuilder(panel, feature_set, (1, pipeline.train_end))
    point = forecast_all_groups(pipeline.predictors, panel, start_day, builder, config)

    outputs = {
        "forecast": point.accuracy.to_csv(run_dir / FORECAST_FILE),
        "median": point.median.to_csv(run_dir / MEDIAN_FILE),
    }
    for name, grid in point.groups.items():
        outputs[f"group-{name}"] = grid.to_csv(run_dir / f"forecast-{name}.csv")
    write_manifest(run_dir, config, "forecast", outputs)
    print(f"✅ Accuracy forecast written to {outputs['forecast']}")
    return 0


def _factor_table(config: PipelineConfig, panel: PanelDataset, index, run_dir: Path) -> QuantileFactorTable:
    settings = config.uncertainty
    if settings.factor_source == "file":
        return QuantileFactorTable.from_csv(_resolve(settings.factor_path))

    print(f"🎯 Fitting quantile factors on split(s) {settings.fit_splits}...")
    feature_set = _feature_set(config)
    problems = []
    for split in _splits(config, panel, settings.fit_splits):
        result = run_split(config, panel, index, feature_set, split, _cache(config), config.workers)
        scorer = HierarchicalScorer(panel, index, split.train_end, config.metrics.trim_leading_zeros)
        problems.append(FactorProblem.from_scorer(scorer, result.forecast.median, split.val_start))
    table, detail = optimize_factors(problems, settings.symmetric_levels, settings.extra_multipliers)
    table.to_csv(run_dir / "quantile-factors.csv")
    detail.to_csv(run_dir / "quantile-factor-fit.csv", index=False, float_format="%.17g")
    return table


def cmd_quantiles(args: argparse.Namespace, config: PipelineConfig) -> int:
    panel = _load_panel(config)
    index = build_hierarchy(panel)
    run_dir = run_directory(config)

    median_path = Path(args.median) if args.median else run_dir / MEDIAN_FILE
    if not median_path.exists():
        cmd_forecast(args, config)
    median = read_forecast_csv(median_path, start_day=panel.n_days + 1)

    table = _factor_table(config, panel, index, run_dir)
    settings = config.uncertainty
    print("📐 Building quantile forecasts...")
    grids = probabilistic_forecast(median, panel, index, table,
                                   correct_11=settings.correct_level11,
                                   correct_12=settings.correct_level12,
                                   level11_strategy=settings.level11_strategy)
    submission = assemble_submission(grids)
    path = run_dir / QUANTILE_FILE
    submission.to_csv(path, index=False, float_format="%.17g")
    write_manifest(run_dir, config, "quantiles", {"quantiles": path})
    print(f"✅ {len(submission)} quantile rows written to {path}")
    return 0


def _is_quantile_file(path: Path) -> bool:
    try:
        ids = pd.read_csv(path, usecols=["id"], nrows=len(QUANTILES))["id"].astype(str)
        suffixes = ids.str.rsplit("_", n=1).str[-1]
        return bool(np.allclose(sorted(float(s) for s in suffixes), QUANTILES))
    except ValueError:
        return False


def cmd_evaluate(args: argparse.Namespace, config: PipelineConfig) -> int:
    path = Path(args.file)
    if not path.exists() or path.stat().st_size == 0:
        raise ValidationError("forecast file is missing or empty", path=str(path))
    panel = _load_panel(config)
    index = build_hierarchy(panel)
    start_day = args.start_day if args.start_day is not None else panel.n_days - HORIZON + 1
    if start_day < 2:
        raise ValidationError(f"evaluation window must start after d_1, got d_{start_day}")
    scorer = HierarchicalScorer(panel, index, start_day - 1, config.metrics.trim_leading_zeros)

    if _is_quantile_file(path):
        report = scorer.score_quantiles(read_quantile_submission(path, index), start_day)
    else:
        grid = read_forecast_csv(path, start_day)
        report = scorer.score_point(grid, start_day)

    run_dir = run_directory(config)
    stem = f"evaluate-{path.stem}"
    outputs = {
        "scores": report.to_csv(run_dir / f"{stem}.csv"),
        "report": EvaluationReporter(report, path, start_day).save_report(run_dir, stem),
    }
    levels_path = run_dir / f"{stem}-levels.csv"
    report.per_level.to_csv(levels_path, index=False, float_format="%.17g")
    outputs["levels"] = levels_path
    write_manifest(run_dir, config, stem, outputs)

    print(f"📊 W{report.metric.upper()}: {report.total:.6f}")
    for row in report.per_level.itertuples(index=False):
        print(f"  level {row.level:>2}: {row.score:.5f}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "prepare": cmd_prepare,
    "backtest": cmd_backtest,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "quantiles": cmd_quantiles,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML (default config/pipeline.yaml)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="pipeline seed")
    common.add_argument("--jobs", type=int, help="worker cap")
    common.add_argument("--output-dir", help="base directory for run outputs")
    common.add_argument("--deterministic", action="store_true", help="run every stage serially (overrides --jobs)")
    common.add_argument("--strict-split-ranges", action="store_true",
                        help="split 1 trains through the day before the last")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="Hierarchical retail sales forecasting pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", parents=[common], help="write synthetic M5-format files")
    gen.add_argument("--out", default="data", help="directory for the three CSV files")
    sub.add_parser("prepare", parents=[common], help="validate inputs and build feature caches")
    sub.add_parser("backtest", parents=[common], help="score every group on the validation splits")
    sub.add_parser("train", parents=[common], help="fit every group on all observed days")
    sub.add_parser("forecast", parents=[common], help="write the 28-day accuracy forecast")
    quant = sub.add_parser("quantiles", parents=[common], help="write the 9-quantile forecast")
    quant.add_argument("--median", help="median forecast CSV (default: the run's median.csv)")
    ev = sub.add_parser("evaluate", parents=[common], help="score a forecast file against the panel")
    ev.add_argument("--file", required=True, help="point (id, F1..) or quantile submission CSV")
    ev.add_argument("--start-day", type=int, help="first forecast day (default: last 28 days)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args)
        if config.deterministic and config.jobs > 1:
            logger.warning("deterministic run: ignoring jobs=%d and running serially", config.jobs)
        return COMMANDS[args.command](args, config)
    except ForecastingError as exc:
        print(f"ERROR {exc.kind} {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.debug("Unhandled failure", exc_info=True)
        print(f"ERROR runtime {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
