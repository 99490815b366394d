"""
Validation splits, model groups, recursive forecasting, backtest and full train.

Tuning runs ``backtest`` over the validation splits (each split trains on
its own training range and forecasts its 28 validation days); the final
model set comes from ``full_train`` through the last observed day.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd

import gbdt
import mlp
from blend import BlendSpec, exponential_smooth, geometric_blend
from errors import SchemaMismatchError, ValidationError
from features import FeatureBuilder, FeatureCache, FeatureSet, ForecastBuffer
from hierarchy import WEIGHT_WINDOW, HierarchyIndex
from metrics import HierarchicalScorer, ScoreReport
from settings import HORIZON, GroupConfig, PipelineConfig

logger = logging.getLogger(__name__)

# Configuration
SPLIT_OFFSETS = {1: 0, 2: 28, 3: 336}
ENSEMBLE = "ensemble"
PIPELINE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ValidationSplit:
    index: int
    train_start: int
    train_end: int
    val_start: int
    val_end: int

    @property
    def name(self) -> str:
        return f"split_{self.index}"

    @property
    def train_days(self) -> Tuple[int, int]:
        return self.train_start, self.train_end

    @property
    def val_days(self) -> Tuple[int, int]:
        return self.val_start, self.val_end


def make_splits(n_days: int, strict_ranges: bool = False,
                use: Sequence[int] = (1, 2, 3)) -> List[ValidationSplit]:
    """
    Validation windows 0, 28 and 336 days back from the final day.

    Each split trains through the day before its window; with
    ``strict_ranges`` split 1 trains through n_days - 1, which
    overlaps its own validation window.
    """
    splits = []
    for index in use:
        if index not in SPLIT_OFFSETS:
            raise ValidationError(f"unknown split {index} (expected one of {sorted(SPLIT_OFFSETS)})")
        val_end = n_days - SPLIT_OFFSETS[index]
        val_start = val_end - HORIZON + 1
        train_end = n_days - 1 if (strict_ranges and index == 1) else val_start - 1
        if val_start < 2 or train_end < WEIGHT_WINDOW:
            logger.warning("Split %d omitted: a %d-day panel is too short for it", index, n_days)
            continue
        if train_end >= val_start:
            logger.warning("Split %d trains through d_%d, overlapping its validation days d_%d..d_%d",
                           index, train_end, val_start, val_end)
        splits.append(ValidationSplit(index, 1, train_end, val_start, val_end))
    return splits


@dataclass(frozen=True)
class ForecastGrid:
    """Point forecasts: rows are series of one level, columns are consecutive days."""

    level: int
    series_keys: List[str]
    start_day: int
    values: np.ndarray
    buffer_reads: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != len(self.series_keys):
            raise ValueError(f"values shape {values.shape} does not match {len(self.series_keys)} series")
        if not np.isfinite(values).all():
            raise ValueError("forecast grid has holes (non-finite values)")
        if (values < 0).any():
            raise ValueError("forecast grid has negative values")
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    @property
    def days(self) -> List[int]:
        return list(range(self.start_day, self.start_day + self.horizon))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[f"F{i}" for i in range(1, self.horizon + 1)])
        frame.insert(0, "id", self.series_keys)
        return frame

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def read_forecast_csv(path: Path, start_day: int, level: int = 12) -> ForecastGrid:
    """Load an ``id, F1..Fh`` submission file."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise ValidationError("forecast file is empty", path=str(path)) from exc
    if frame.empty or "id" not in frame.columns:
        raise ValidationError("forecast file has no rows or no id column", path=str(path))
    horizon_cols = [c for c in frame.columns if c.startswith("F")]
    try:
        return ForecastGrid(level=level, series_keys=frame["id"].astype(str).tolist(),
                            start_day=start_day, values=frame[horizon_cols].to_numpy(dtype=float))
    except ValueError as exc:
        raise ValidationError(str(exc), path=str(path)) from exc


@dataclass
class ConstantPredictor:
    value: float
    schema_hash: Optional[str] = None

    def predict(self, matrix) -> np.ndarray:
        return np.full(len(matrix), self.value)


@dataclass
class OraclePredictor:
    """Returns the recorded sales for each row; a harness sanity check."""

    history: np.ndarray
    schema_hash: Optional[str] = None

    def predict(self, matrix) -> np.ndarray:
        values = self.history[matrix.series_index, matrix.days - 1]
        return np.nan_to_num(values, nan=0.0)


class ModelGroup:
    """Builds and fits one configured model group."""

    def __init__(self, config: GroupConfig, seed: int, jobs: int = 1):
        self.config = config
        self.seed = seed
        self.jobs = jobs

    @property
    def name(self) -> str:
        return self.config.name

    def gbdt_params(self) -> gbdt.GbdtParams:
        params = dict(self.config.params)
        params.setdefault("rng_seed", self.seed)
        return gbdt.GbdtParams.from_dict(params)

    def mlp_config(self) -> mlp.MlpConfig:
        params = dict(self.config.params)
        params.setdefault("rng_seed", self.seed)
        if self.config.window_days is not None:
            params["window_days"] = self.config.window_days
        return mlp.MlpConfig.from_dict(params)

    def fit(self, matrix, panel):
        kind = self.config.kind
        logger.info("Fitting group %s (%s) on %d rows", self.name, kind, len(matrix))
        if kind == "gbdt":
            return gbdt.fit(_window(matrix, self.config.window_days), self.gbdt_params())
        if kind == "gbdt_per_store":
            return gbdt.fit_per_store(_window(matrix, self.config.window_days), self.gbdt_params(),
                                      per_store_estimators=self.config.per_store_estimators,
                                      jobs=self.jobs)
        if kind == "mlp":
            presets = [dict(p) for p in self.config.presets]
            return mlp.fit_group(matrix, self.mlp_config(), presets, jobs=self.jobs)
        if kind == "constant":
            return ConstantPredictor(float(self.config.params.get("value", 1.0)))
        if kind == "oracle":
            return OraclePredictor(np.asarray(panel.history))
        raise ValidationError(f"unknown group kind {kind}")


def _window(matrix, window_days: Optional[int]):
    if window_days is None:
        return matrix
    return matrix.select(matrix.days >= matrix.days.max() - window_days + 1)


def recursive_forecast(predictor, panel, start_day: int, builder: FeatureBuilder,
                       horizon: int = HORIZON, mode: str = "recursive") -> ForecastGrid:
    """
    Day-by-day forecast of every level-12 series from ``start_day``.

    recursive: each day's clipped forecast is written into the buffer before
    the next day's features are built.
    direct: features for every day read only the observed history (the
    buffer stays empty); used as a reference.
    Inactive series forecast 0.
    """
    expected = getattr(predictor, "schema_hash", None)
    if expected not in (None, "array") and expected != builder.feature_set.schema_hash:
        raise SchemaMismatchError(
            f"model schema {expected} differs from feature schema {builder.feature_set.schema_hash}")
    if mode not in ("recursive", "direct"):
        raise ValueError(f"unknown forecast mode '{mode}'")

    buffer = ForecastBuffer(panel, start_day, horizon)
    direct = np.zeros((panel.n_series_level12, horizon))
    reads = 0
    for step, day in enumerate(range(start_day, start_day + horizon)):
        matrix = builder.inference_matrix(day, buffer)
        reads += matrix.buffer_reads
        prediction = np.zeros(panel.n_series_level12)
        if len(matrix):
            prediction[matrix.series_index] = np.maximum(predictor.predict(matrix), 0.0)
        if mode == "recursive":
            buffer.write(day, prediction)
        else:
            direct[:, step] = prediction
    values = buffer.forecasts() if mode == "recursive" else direct
    logger.debug("Forecast d_%d..d_%d done (%d buffer reads)", start_day, start_day + horizon - 1, reads)
    return ForecastGrid(level=12, series_keys=list(panel.series_keys), start_day=start_day,
                        values=values, buffer_reads=reads)


@dataclass
class PointForecast:
    """Per-group grids, their blend, and the smoothed blend."""

    groups: Dict[str, ForecastGrid]
    blended: ForecastGrid
    smoothed: ForecastGrid
    apply_to_accuracy: bool = True

    @property
    def accuracy(self) -> ForecastGrid:
        return self.smoothed if self.apply_to_accuracy else self.blended

    @property
    def median(self) -> ForecastGrid:
        return self.smoothed


def forecast_all_groups(predictors: Dict[str, object], panel, start_day: int, builder: FeatureBuilder,
                        config: PipelineConfig, horizon: int = HORIZON) -> PointForecast:
    """Recursive forecast per group (each with its own buffer), then blend and smooth."""
    grids = {name: recursive_forecast(p, panel, start_day, builder, horizon)
             for name, p in predictors.items()}
    spec = BlendSpec.from_config(config.blend).restricted(grids)
    blended = geometric_blend(grids, spec)

    smoothing = config.smoothing
    history = None
    if smoothing.mode == "history":
        lo = max(0, start_day - 1 - smoothing.history_days)
        history = np.asarray(panel.history)[:, lo:start_day - 1]
    smoothed = exponential_smooth(blended, smoothing.alpha, smoothing.mode, history)
    return PointForecast(groups=grids, blended=blended, smoothed=smoothed,
                         apply_to_accuracy=smoothing.apply_to_accuracy)


def fit_groups(config: PipelineConfig, matrix, panel, jobs: int = 1) -> Dict[str, object]:
    return {g.name: ModelGroup(g, config.seed, jobs).fit(matrix, panel) for g in config.enabled_groups()}


@dataclass
class FittedPipeline:
    """Fitted group predictors plus what is needed to rebuild their features."""

    predictors: Dict[str, object]
    train_end: int
    schema_hash: str

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"format_version": PIPELINE_FORMAT_VERSION, "pipeline": self}, path)
        return path

    @staticmethod
    def load(path: Path) -> "FittedPipeline":
        payload = joblib.load(Path(path))
        if payload.get("format_version") != PIPELINE_FORMAT_VERSION:
            raise SchemaMismatchError(f"{path}: unsupported pipeline format {payload.get('format_version')}")
        return payload["pipeline"]


def full_train(config: PipelineConfig, panel, feature_set: FeatureSet,
               cache: Optional[FeatureCache] = None) -> Tuple[FittedPipeline, FeatureBuilder]:
    """Retrain every enabled group on all observed days."""
    train_end = panel.n_days
    builder = FeatureBuilder(panel, feature_set, (1, train_end))
    matrix = builder.training_matrix(1, train_end, cache)
    predictors = fit_groups(config, matrix, panel, config.workers)
    return FittedPipeline(predictors, train_end, feature_set.schema_hash), builder


@dataclass
class SplitResult:
    split: ValidationSplit
    forecast: PointForecast
    reports: Dict[str, ScoreReport]


@dataclass
class BacktestResult:
    splits: List[SplitResult] = field(default_factory=list)

    def score_table(self) -> pd.DataFrame:
        """WRMSSE per split and component, plus mean and std rows."""
        rows = {r.split.name: {name: rep.total for name, rep in r.reports.items()} for r in self.splits}
        table = pd.DataFrame.from_dict(rows, orient="index")
        if len(table):
            summary = pd.DataFrame([table.mean(), table.std(ddof=0)], index=["mean", "std"])
            table = pd.concat([table, summary])
        table.index.name = "split"
        return table

    def per_level(self) -> pd.DataFrame:
        frames = []
        for r in self.splits:
            for name, rep in r.reports.items():
                frames.append(rep.per_level.assign(split=r.split.name, component=name))
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def run_split(config: PipelineConfig, panel, index: HierarchyIndex, feature_set: FeatureSet,
              split: ValidationSplit, cache: Optional[FeatureCache] = None, jobs: int = 1) -> SplitResult:
    """Train on the split's training range, forecast its validation window and score it."""
    logger.info("Backtesting %s: train d_%d..d_%d, validate d_%d..d_%d", split.name,
                split.train_start, split.train_end, split.val_start, split.val_end)
    builder = FeatureBuilder(panel, feature_set, split.train_days)
    matrix = builder.training_matrix(split.train_start, split.train_end, cache)
    predictors = fit_groups(config, matrix, panel, jobs)
    forecast = forecast_all_groups(predictors, panel, split.val_start, builder, config)

    scorer = HierarchicalScorer(panel, index, split.train_end, config.metrics.trim_leading_zeros)
    reports = {name: scorer.score_point(grid, split.val_start) for name, grid in forecast.groups.items()}
    reports[ENSEMBLE] = scorer.score_point(forecast.accuracy, split.val_start)
    return SplitResult(split=split, forecast=forecast, reports=reports)


def backtest(config: PipelineConfig, panel, index: HierarchyIndex, feature_set: FeatureSet,
             splits: Sequence[ValidationSplit], cache: Optional[FeatureCache] = None) -> BacktestResult:
    """Score every split; splits run concurrently when config.workers > 1."""
    if not splits:
        raise ValidationError("no validation splits to backtest")
    if config.workers > 1 and len(splits) > 1:
        with ThreadPoolExecutor(max_workers=min(config.workers, len(splits))) as pool:
            results = list(pool.map(lambda s: run_split(config, panel, index, feature_set, s, cache), splits))
    else:
        results = [run_split(config, panel, index, feature_set, s, cache, config.workers) for s in splits]
    return BacktestResult(splits=results)
