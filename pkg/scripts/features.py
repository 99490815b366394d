"""
Feature engineering for single-day sales regression.

Six feature groups, configured from config/features.yaml:

- categorical: integer codes (0 = unseen) and mean-target encodings
- price: current weekly price plus expanding max/min/mean/std/n_unique
- calendar: weekday, month, year, event class for both slots, SNAP flags
- lag: sales 28+k days back
- rolling: mean/std over windows ending 28 days back
- lag_rolling: mean/std over windows ending L days back

Sales-derived features only ever read days strictly before the target day.
In recursive-inference mode they read a ForecastBuffer (observed history up
to the forecast start followed by earlier forecasts) and every read of a
buffer day is counted in ``FeatureMatrix.buffer_reads``.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq
import yaml

from data_ingest import EVENT_TYPES, SNAP_COLUMNS
from errors import ConfigError, ValidationError
from settings import HORIZON

logger = logging.getLogger(__name__)

# Configuration
FEATURE_GROUPS = ("categorical", "price", "calendar", "lag", "rolling", "lag_rolling")
DEFAULT_FEATURES_PATH = Path(__file__).resolve().parent.parent / "config" / "features.yaml"
CATEGORICAL_COLUMNS = ("item_id", "dept_id", "cat_id", "store_id", "state_id")
LAG_OFFSET = 28
DEFAULT_LAGS = tuple(range(1, 15))
DEFAULT_WINDOWS = (7, 14, 28, 56)
DEFAULT_LAG_ROLLING_LAGS = (35, 42)
DEFAULT_LAG_ROLLING_WINDOWS = (7, 28)
SNAP_MODES = ("own", "raw", "both")
PRICE_FEATURES = ("price", "price_max", "price_min", "price_mean", "price_std", "price_n_unique")
EVENT_CODES = {name: code for code, name in enumerate(EVENT_TYPES, start=1)}
CACHE_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    params: Dict[str, Any] = field(default_factory=dict, hash=False)

    def lookback(self) -> int:
        """Furthest day back (relative to the target day) this feature reads."""
        if self.group == "lag":
            return self.params["offset"]
        if self.group in ("rolling", "lag_rolling"):
            return self.params["lag"] + self.params["window"] - 1
        return 0


@dataclass(frozen=True)
class FeatureSet:
    """Ordered, validated feature roster."""

    specs: Tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [s.name for s in self.specs]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigError(f"duplicate feature names {duplicates}")
        for spec in self.specs:
            if spec.group not in FEATURE_GROUPS:
                raise ConfigError(f"feature {spec.name}: unknown group '{spec.group}'")
            for key in ("offset", "lag", "window"):
                if key in spec.params and int(spec.params[key]) < 1:
                    raise ConfigError(f"feature {spec.name}: {key} must be positive")

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.specs]

    def by_group(self, group: str) -> List[FeatureSpec]:
        return [s for s in self.specs if s.group == group]

    @property
    def max_lookback(self) -> int:
        return max([s.lookback() for s in self.specs] + [1])

    @property
    def schema_hash(self) -> str:
        payload = json.dumps([[s.name, s.group, s.params] for s in self.specs], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "FeatureSet":
        """Expand the grouped YAML layout into individual FeatureSpecs."""
        raw = dict(raw or {})
        known = {"categorical", "price", "calendar", "lags", "rolling", "lag_rolling"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"features: unknown sections {unknown}")
        specs: List[FeatureSpec] = []

        categorical = raw.get("categorical") or {}
        for col in categorical.get("codes", []):
            _check_categorical(col)
            specs.append(FeatureSpec(col, "categorical", {"encoding": "code"}))
        for col in categorical.get("target_encoding", []):
            _check_categorical(col)
            specs.append(FeatureSpec(f"te_{col}", "categorical", {"encoding": "mean", "column": col}))

        if raw.get("price", False):
            specs.extend(FeatureSpec(name, "price") for name in PRICE_FEATURES)

        calendar = raw.get("calendar")
        if calendar:
            calendar = calendar if isinstance(calendar, dict) else {}
            snap = calendar.get("snap", "both")
            if snap not in SNAP_MODES:
                raise ConfigError(f"features.calendar.snap must be one of {SNAP_MODES}")
            for name in ("wday", "month", "year", "event_type_1", "event_type_2"):
                specs.append(FeatureSpec(name, "calendar"))
            if snap in ("own", "both"):
                specs.append(FeatureSpec("snap", "calendar", {"snap": "own"}))
            if snap in ("raw", "both"):
                specs.extend(FeatureSpec(col, "calendar", {"snap": col}) for col in SNAP_COLUMNS)

        lags = raw.get("lags")
        if lags:
            base = int(lags.get("offset", LAG_OFFSET))
            for k in lags.get("k", list(DEFAULT_LAGS)):
                specs.append(FeatureSpec(f"lag_{base + int(k)}", "lag", {"offset": base + int(k)}))
            for offset in lags.get("extra", []):
                specs.append(FeatureSpec(f"lag_{int(offset)}", "lag", {"offset": int(offset)}))

        rolling = raw.get("rolling")
        if rolling:
            shift = int(rolling.get("shift", LAG_OFFSET))
            for w in rolling.get("windows", list(DEFAULT_WINDOWS)):
                specs.extend(_window_specs("rolling", shift, int(w)))

        lag_rolling = raw.get("lag_rolling")
        if lag_rolling:
            for lag in lag_rolling.get("lags", list(DEFAULT_LAG_ROLLING_LAGS)):
                for w in lag_rolling.get("windows", list(DEFAULT_LAG_ROLLING_WINDOWS)):
                    specs.extend(_window_specs("lag_rolling", int(lag), int(w)))

        if not specs:
            raise ConfigError("feature roster is empty")
        return cls(specs=tuple(specs))


def _check_categorical(col: str):
    if col not in CATEGORICAL_COLUMNS:
        raise ConfigError(f"unknown categorical column '{col}' (expected one of {CATEGORICAL_COLUMNS})")


def _window_specs(group: str, lag: int, window: int) -> List[FeatureSpec]:
    params = {"lag": lag, "window": window}
    return [FeatureSpec(f"rmean_{lag}_{window}", group, dict(params, stat="mean")),
            FeatureSpec(f"rstd_{lag}_{window}", group, dict(params, stat="std"))]


def load_feature_specs(path: Optional[Path] = None) -> FeatureSet:
    path = Path(path) if path is not None else DEFAULT_FEATURES_PATH
    if not path.exists():
        raise ConfigError(f"feature spec file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return FeatureSet.from_dict(raw)


def default_feature_set() -> FeatureSet:
    return FeatureSet.from_dict({
        "categorical": {"codes": list(CATEGORICAL_COLUMNS), "target_encoding": list(CATEGORICAL_COLUMNS)},
        "price": True,
        "calendar": {"snap": "both"},
        "lags": {"offset": LAG_OFFSET, "k": list(DEFAULT_LAGS)},
        "rolling": {"shift": LAG_OFFSET, "windows": list(DEFAULT_WINDOWS)},
        "lag_rolling": {"lags": list(DEFAULT_LAG_ROLLING_LAGS), "windows": list(DEFAULT_LAG_ROLLING_WINDOWS)},
    })


@dataclass
class FeatureMatrix:
    """Rows are (level-12 series, day) pairs; NaN marks a missing feature."""

    series_index: np.ndarray
    days: np.ndarray
    stores: np.ndarray
    columns: List[str]
    values: np.ndarray
    target: np.ndarray
    schema_hash: str
    categorical: Dict[str, int] = field(default_factory=dict)
    buffer_reads: int = 0

    def __len__(self) -> int:
        return len(self.days)

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def select(self, mask: np.ndarray) -> "FeatureMatrix":
        return dataclasses.replace(
            self,
            series_index=self.series_index[mask],
            days=self.days[mask],
            stores=self.stores[mask],
            values=self.values[mask],
            target=self.target[mask],
        )

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.series_index, self.days, self.values, self.target):
            digest.update(np.ascontiguousarray(arr).tobytes())
        digest.update(json.dumps(self.columns).encode("utf-8"))
        return digest.hexdigest()

    @staticmethod
    def concat(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        return dataclasses.replace(
            first,
            series_index=np.concatenate([p.series_index for p in parts]),
            days=np.concatenate([p.days for p in parts]),
            stores=np.concatenate([p.stores for p in parts]),
            values=np.vstack([p.values for p in parts]),
            target=np.concatenate([p.target for p in parts]),
            buffer_reads=sum(p.buffer_reads for p in parts),
        )


@dataclass(frozen=True)
class TargetEncoding:
    column: str
    mapping: Dict[str, float]
    global_mean: float

    def lookup(self, categories: Sequence[str]) -> np.ndarray:
        return np.array([self.mapping.get(c, self.global_mean) for c in categories], dtype=float)


def mean_target_encode(panel, column: str, train_days: Tuple[int, int]) -> TargetEncoding:
    """Mean unit sales per category over active days inside train_days only."""
    first, last = train_days
    if first > last or first < 1:
        raise ValidationError(f"train_days {train_days} is empty")
    last = min(last, panel.n_days)
    window = panel.history[:, first - 1:last]
    sums = np.nansum(window, axis=1)
    counts = np.sum(~np.isnan(window), axis=1)
    if counts.sum() == 0:
        raise ValidationError(f"no active sales rows in days {first}..{last}")

    frame = pd.DataFrame({"category": panel.series[column].to_numpy(), "sum": sums, "count": counts})
    grouped = frame.groupby("category", sort=True)[["sum", "count"]].sum()
    grouped = grouped[grouped["count"] > 0]
    mapping = (grouped["sum"] / grouped["count"]).to_dict()
    global_mean = float(sums.sum() / counts.sum())
    return TargetEncoding(column=column, mapping=mapping, global_mean=global_mean)


@dataclass
class _SalesView:
    """Sales for days first_day .. first_day + n - 1 with NaN-aware prefix sums."""

    values: np.ndarray
    first_day: int

    def __post_init__(self):
        filled = np.nan_to_num(self.values, nan=0.0)
        zeros = np.zeros((self.values.shape[0], 1))
        self._sum = np.hstack([zeros, np.cumsum(filled, axis=1)])
        self._sq = np.hstack([zeros, np.cumsum(filled * filled, axis=1)])
        self._nan = np.hstack([zeros, np.cumsum(np.isnan(self.values), axis=1)])

    @property
    def last_day(self) -> int:
        return self.first_day + self.values.shape[1] - 1

    def lag(self, series_idx: np.ndarray, day: np.ndarray) -> np.ndarray:
        out = np.full(len(day), np.nan)
        ok = (day >= self.first_day) & (day <= self.last_day)
        out[ok] = self.values[series_idx[ok], day[ok] - self.first_day]
        return out

    def window(self, series_idx: np.ndarray, end: np.ndarray, w: int) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and population std over [end - w + 1, end]; NaN if any day is missing."""
        begin = end - w + 1
        mean = np.full(len(end), np.nan)
        std = np.full(len(end), np.nan)
        ok = (begin >= self.first_day) & (end <= self.last_day)
        s, hi, lo = series_idx[ok], end[ok] - self.first_day + 1, begin[ok] - self.first_day
        complete = (self._nan[s, hi] - self._nan[s, lo]) == 0
        m = (self._sum[s, hi] - self._sum[s, lo]) / w
        var = (self._sq[s, hi] - self._sq[s, lo]) / w - m * m
        mean[ok] = np.where(complete, m, np.nan)
        std[ok] = np.where(complete, np.sqrt(np.maximum(var, 0.0)), np.nan)
        return mean, std


class ForecastBuffer:
    """
    Observed history up to start_day - 1 followed by the forecasts written so far.

    Actuals on or after start_day are never copied in.
    """

    def __init__(self, panel, start_day: int, horizon: int = HORIZON):
        if not 2 <= start_day <= panel.n_days + 1:
            raise ValidationError(f"forecast start d_{start_day} outside 2..{panel.n_days + 1}")
        self.start_day = start_day
        self.horizon = horizon
        self.first_active = np.asarray(panel.first_active)
        n_series = len(self.first_active)
        self.values = np.full((n_series, start_day - 1 + horizon), np.nan)
        self.values[:, :start_day - 1] = panel.history[:, :start_day - 1]

    def write(self, day: int, forecast: np.ndarray):
        if not self.start_day <= day < self.start_day + self.horizon:
            raise ValueError(f"d_{day} is outside the buffer horizon")
        active = self.first_active <= day
        self.values[:, day - 1] = np.where(active, forecast, np.nan)

    def forecasts(self) -> np.ndarray:
        """(n_series, horizon) forecasts with inactive cells as 0."""
        return np.nan_to_num(self.values[:, self.start_day - 1:], nan=0.0)


def _weekly_price_stats(panel) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Expanding per-week price statistics (n_series, n_weeks) and the day -> week map."""
    calendar = panel.calendar
    weeks = np.sort(calendar["wm_yr_wk"].unique())
    week_pos = {w: i for i, w in enumerate(weeks)}
    day_week = calendar["wm_yr_wk"].map(week_pos).to_numpy()

    # one price per (series, week); the daily grid repeats it
    first_day_of_week = np.unique(day_week, return_index=True)[1]
    by_week = np.asarray(panel.price_grid)[:, first_day_of_week]
    known = ~np.isnan(by_week)
    filled = np.nan_to_num(by_week, nan=0.0)
    count = np.cumsum(known, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.cumsum(filled, axis=1) / count
        var = np.cumsum(filled * filled, axis=1) / count - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))

    rows, cols = np.nonzero(known)
    long = pd.DataFrame({"row": rows, "col": cols, "price": by_week[rows, cols]})
    first_seen = np.zeros_like(by_week)
    fresh = ~long.duplicated(subset=["row", "price"]).to_numpy()
    first_seen[long["row"].to_numpy()[fresh], long["col"].to_numpy()[fresh]] = 1.0
    n_unique = np.cumsum(first_seen, axis=1)

    none_yet = count == 0
    stats = {
        "price": by_week,
        "price_max": np.fmax.accumulate(by_week, axis=1),
        "price_min": np.fmin.accumulate(by_week, axis=1),
        "price_mean": mean,
        "price_std": std,
        "price_n_unique": n_unique,
    }
    for name in PRICE_FEATURES[1:]:
        stats[name] = np.where(none_yet, np.nan, stats[name])
    return stats, day_week


class FeatureBuilder:
    """
    Builds FeatureMatrix blocks for one panel and one training range.

    Mean-target encodings are fitted on ``train_days`` only. Calendar and
    price blocks for inference days are computed once and reused across the
    recursive loop.
    """

    def __init__(self, panel, feature_set: FeatureSet, train_days: Tuple[int, int]):
        self.panel = panel
        self.feature_set = feature_set
        self.train_days = train_days
        series = panel.series

        self._codes: Dict[str, np.ndarray] = {}
        self.categorical: Dict[str, int] = {}
        for spec in feature_set.by_group("categorical"):
            if spec.params["encoding"] == "code":
                categories = sorted(series[spec.name].unique())
                lookup = {c: i + 1 for i, c in enumerate(categories)}
                self._codes[spec.name] = series[spec.name].map(lookup).to_numpy(dtype=float)
                self.categorical[spec.name] = len(categories)
            else:
                column = spec.params["column"]
                encoding = mean_target_encode(panel, column, train_days)
                self._codes[spec.name] = encoding.lookup(series[column].tolist())

        self._stores = series["store_id"].to_numpy()
        snap_cols = {col: i for i, col in enumerate(SNAP_COLUMNS)}
        self._own_snap = np.array([snap_cols.get(f"snap_{s}", -1) for s in series["state_id"]])

        calendar = panel.calendar
        self._calendar = {
            "wday": calendar["wday"].to_numpy(dtype=float),
            "month": calendar["month"].to_numpy(dtype=float),
            "year": calendar["year"].to_numpy(dtype=float),
            "event_type_1": calendar["event_type_1"].map(EVENT_CODES).fillna(0).to_numpy(dtype=float),
            "event_type_2": calendar["event_type_2"].map(EVENT_CODES).fillna(0).to_numpy(dtype=float),
        }
        self._snap = calendar[SNAP_COLUMNS].to_numpy(dtype=float)

        self._prices = None
        if feature_set.by_group("price"):
            self._prices = _weekly_price_stats(panel)

        self._training_view: Optional[_SalesView] = None
        self._static_cache: Dict[int, np.ndarray] = {}

    def _check_days(self, days: np.ndarray):
        if len(days) and days.max() > self.panel.n_calendar_days:
            raise ValidationError(
                f"requested day d_{int(days.max())} is beyond the calendar "
                f"(d_{self.panel.n_calendar_days})")

    def _static_block(self, series_idx: np.ndarray, days: np.ndarray) -> np.ndarray:
        """Categorical, price and calendar columns (known ahead of time)."""
        specs = [s for s in self.feature_set.specs if s.group in ("categorical", "price", "calendar")]
        block = np.empty((len(days), len(specs)))
        cal_pos = days - 1
        for j, spec in enumerate(specs):
            if spec.group == "categorical":
                block[:, j] = self._codes[spec.name][series_idx]
            elif spec.group == "price":
                stats, day_week = self._prices
                block[:, j] = stats[spec.name][series_idx, day_week[cal_pos]]
            elif "snap" in spec.params:
                if spec.params["snap"] == "own":
                    col = self._own_snap[series_idx]
                    block[:, j] = np.where(col >= 0, self._snap[cal_pos, np.maximum(col, 0)], 0.0)
                else:
                    block[:, j] = self._snap[cal_pos, SNAP_COLUMNS.index(spec.params["snap"])]
            else:
                block[:, j] = self._calendar[spec.name][cal_pos]
        return block

    def _sales_block(self, view: _SalesView, series_idx: np.ndarray, days: np.ndarray,
                     buffer_start: Optional[int]) -> Tuple[np.ndarray, int]:
        specs = [s for s in self.feature_set.specs if s.group in ("lag", "rolling", "lag_rolling")]
        block = np.empty((len(days), len(specs)))
        reads = 0
        windows: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}
        for j, spec in enumerate(specs):
            if spec.group == "lag":
                ref = days - spec.params["offset"]
                block[:, j] = view.lag(series_idx, ref)
            else:
                ref = days - spec.params["lag"]
                key = (spec.params["lag"], spec.params["window"])
                if key not in windows:
                    windows[key] = view.window(series_idx, ref, spec.params["window"])
                block[:, j] = windows[key][0 if spec.params["stat"] == "mean" else 1]
            if buffer_start is not None:
                reads += int(np.sum((ref >= buffer_start) & (ref >= 1)))
        return block, reads

    def _assemble(self, series_idx: np.ndarray, days: np.ndarray, static: np.ndarray,
                  sales: np.ndarray, target: np.ndarray, reads: int) -> FeatureMatrix:
        static_names = [s.name for s in self.feature_set.specs
                        if s.group in ("categorical", "price", "calendar")]
        sales_names = [s.name for s in self.feature_set.specs
                       if s.group in ("lag", "rolling", "lag_rolling")]
        by_name = dict(zip(static_names, static.T))
        by_name.update(zip(sales_names, sales.T))
        columns = self.feature_set.names
        values = np.column_stack([by_name[c] for c in columns]) if columns else np.empty((len(days), 0))
        return FeatureMatrix(
            series_index=series_idx.astype(np.int64),
            days=days.astype(np.int64),
            stores=self._stores[series_idx],
            columns=list(columns),
            values=np.ascontiguousarray(values, dtype=float),
            target=target,
            schema_hash=self.feature_set.schema_hash,
            categorical=dict(self.categorical),
            buffer_reads=reads,
        )

    def training_matrix(self, first_day: int, last_day: int,
                        cache: Optional["FeatureCache"] = None) -> FeatureMatrix:
        """One row per active (series, day) with first_day <= day <= last_day."""
        if not 1 <= first_day <= last_day <= self.panel.n_days:
            raise ValidationError(
                f"training range d_{first_day}..d_{last_day} outside the panel (1..{self.panel.n_days})")
        key = None
        if cache is not None:
            key = cache_key(panel_fingerprint(self.panel), self.feature_set,
                            (first_day, last_day), self.train_days)
            cached = cache.load(key, self.feature_set.schema_hash)
            if cached is not None:
                return cached

        days_range = np.arange(first_day, last_day + 1)
        active = days_range[None, :] >= np.asarray(self.panel.first_active)[:, None]
        # day-major row order
        day_pos, series_idx = np.nonzero(active.T)
        days = days_range[day_pos]
        self._check_days(days)

        if self._training_view is None:
            self._training_view = _SalesView(np.asarray(self.panel.history), 1)
        static = self._static_block(series_idx, days)
        sales, _ = self._sales_block(self._training_view, series_idx, days, None)
        target = np.asarray(self.panel.history)[series_idx, days - 1].astype(float)
        matrix = self._assemble(series_idx, days, static, sales, target, 0)

        if cache is not None:
            cache.save(key, matrix)
        return matrix

    def inference_matrix(self, day: int, buffer: ForecastBuffer) -> FeatureMatrix:
        """Rows for every series active on ``day``, sales features read from the buffer."""
        days = np.array([day])
        self._check_days(days)
        series_idx = np.flatnonzero(np.asarray(self.panel.first_active) <= day)
        days = np.full(len(series_idx), day)

        lo = max(1, day - self.feature_set.max_lookback)
        view = _SalesView(buffer.values[:, lo - 1:day - 1], lo)
        if day not in self._static_cache:
            self._static_cache[day] = self._static_block(series_idx, days)
        static = self._static_cache[day]
        sales, reads = self._sales_block(view, series_idx, days, buffer.start_day)
        target = np.full(len(series_idx), np.nan)
        return self._assemble(series_idx, days, static, sales, target, reads)


def assemble_matrix(panel, feature_set: FeatureSet, day_range: Tuple[int, int],
                    mode: str = "training", buffer: Optional[ForecastBuffer] = None,
                    train_days: Optional[Tuple[int, int]] = None,
                    builder: Optional[FeatureBuilder] = None) -> FeatureMatrix:
    """
    Build the feature matrix for a day range.

    training: active (series, day) rows with targets.
    recursive-inference: one block per day read from ``buffer``.
    """
    first, last = day_range
    if builder is None:
        fit_end = min(last, panel.n_days) if mode == "training" else min(first - 1, panel.n_days)
        builder = FeatureBuilder(panel, feature_set, train_days or (1, max(fit_end, 1)))
    if mode == "training":
        return builder.training_matrix(first, last)
    if mode == "recursive-inference":
        if buffer is None:
            raise ValueError("recursive-inference mode needs a ForecastBuffer")
        return FeatureMatrix.concat([builder.inference_matrix(day, buffer)
                                     for day in range(first, last + 1)])
    raise ValueError(f"unknown mode '{mode}'")


def _series_position(panel, series: str) -> int:
    keys = panel.series_keys
    if series not in keys:
        raise ValidationError(f"unknown series {series}")
    return keys.index(series)


def price_features(panel, series: str, day: int) -> pd.Series:
    """Current price and stats over all weeks up to and including the day's week."""
    row = panel.series.iloc[_series_position(panel, series)]
    week = int(panel.calendar["wm_yr_wk"].iloc[day - 1])
    prices = panel.prices
    history = prices[(prices["item_id"] == row["item_id"]) & (prices["store_id"] == row["store_id"])
                     & (prices["wm_yr_wk"] <= week)]
    values = history["sell_price"].to_numpy(dtype=float)
    current = history.loc[history["wm_yr_wk"] == week, "sell_price"]
    if len(values) == 0:
        return pd.Series(np.nan, index=list(PRICE_FEATURES))
    return pd.Series([
        float(current.iloc[0]) if len(current) else np.nan,
        values.max(), values.min(), values.mean(), values.std(ddof=0), float(len(np.unique(values))),
    ], index=list(PRICE_FEATURES))


def calendar_features(calendar: pd.DataFrame, day: int, state: str) -> pd.Series:
    if not 1 <= day <= len(calendar):
        raise ValidationError(f"d_{day} is not in the calendar")
    row = calendar.iloc[day - 1]
    snap_col = f"snap_{state}"
    return pd.Series({
        "wday": int(row["wday"]),
        "month": int(row["month"]),
        "year": int(row["year"]),
        "event_type_1": EVENT_CODES.get(row["event_type_1"], 0),
        "event_type_2": EVENT_CODES.get(row["event_type_2"], 0),
        "snap": int(row[snap_col]) if snap_col in calendar.columns else 0,
        **{col: int(row[col]) for col in SNAP_COLUMNS},
    })


def lag_features(panel, series: str, day: int, lags: Sequence[int] = DEFAULT_LAGS) -> pd.Series:
    pos = _series_position(panel, series)
    view = _SalesView(np.asarray(panel.history)[pos:pos + 1], 1)
    offsets = [LAG_OFFSET + k for k in lags]
    values = [view.lag(np.array([0]), np.array([day - o]))[0] for o in offsets]
    return pd.Series(values, index=[f"lag_{o}" for o in offsets])


def lag_rolling_features(panel, series: str, day: int, lag: int,
                         windows: Sequence[int] = DEFAULT_LAG_ROLLING_WINDOWS) -> pd.Series:
    pos = _series_position(panel, series)
    view = _SalesView(np.asarray(panel.history)[pos:pos + 1], 1)
    out = {}
    for w in windows:
        mean, std = view.window(np.array([0]), np.array([day - lag]), w)
        out[f"rmean_{lag}_{w}"] = mean[0]
        out[f"rstd_{lag}_{w}"] = std[0]
    return pd.Series(out)


def rolling_features(panel, series: str, day: int,
                     windows: Sequence[int] = DEFAULT_WINDOWS) -> pd.Series:
    return lag_rolling_features(panel, series, day, LAG_OFFSET, windows)


def panel_fingerprint(panel) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(panel.series_keys).encode("utf-8"))
    digest.update(np.ascontiguousarray(panel.history).tobytes())
    digest.update(np.ascontiguousarray(panel.price_grid).tobytes())
    digest.update(pd.util.hash_pandas_object(panel.calendar, index=False).to_numpy().tobytes())
    return digest.hexdigest()


def cache_key(fingerprint: str, feature_set: FeatureSet, day_range: Tuple[int, int],
              train_days: Tuple[int, int]) -> str:
    payload = json.dumps([fingerprint, feature_set.schema_hash, list(day_range), list(train_days)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:20]


class FeatureCache:
    """Parquet-backed cache of training matrices with schema and content hashes."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.directory / f"features-{key}.parquet"

    def save(self, key: str, matrix: FeatureMatrix) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        data = {
            "series_index": matrix.series_index,
            "d_index": matrix.days,
            "store_id": matrix.stores.astype(str),
            "target": matrix.target,
        }
        for j, name in enumerate(matrix.columns):
            data[f"f:{name}"] = matrix.values[:, j]
        metadata = {
            b"format_version": CACHE_FORMAT_VERSION.encode(),
            b"schema_hash": matrix.schema_hash.encode(),
            b"content_hash": matrix.content_hash().encode(),
            b"columns": json.dumps(matrix.columns).encode(),
            b"categorical": json.dumps(matrix.categorical, sort_keys=True).encode(),
        }
        table = pa.table(data).replace_schema_metadata(metadata)
        path = self.path_for(key)
        pq.write_table(table, path)
        return path

    def load(self, key: str, expected_schema: str) -> Optional[FeatureMatrix]:
        """Cached matrix, or None on a miss or a corrupted/stale file (rebuild)."""
        path = self.path_for(key)
        if not path.exists():
            self.misses += 1
            return None
        try:
            table = pq.read_table(path)
            meta = table.schema.metadata or {}
            columns = json.loads(meta[b"columns"].decode())
            matrix = FeatureMatrix(
                series_index=table.column("series_index").to_numpy(),
                days=table.column("d_index").to_numpy(),
                stores=np.asarray(table.column("store_id").to_pylist(), dtype=object),
                columns=columns,
                values=np.column_stack([table.column(f"f:{c}").to_numpy() for c in columns])
                if columns else np.empty((table.num_rows, 0)),
                target=table.column("target").to_numpy(),
                schema_hash=meta[b"schema_hash"].decode(),
                categorical=json.loads(meta[b"categorical"].decode()),
            )
            stored_hash = meta[b"content_hash"].decode()
        except (pa.ArrowException, KeyError, ValueError, OSError) as exc:
            logger.warning("Feature cache %s unreadable (%s); rebuilding", path.name, exc)
            self.misses += 1
            return None

        if matrix.schema_hash != expected_schema:
            logger.warning("Feature cache %s has schema %s, expected %s; rebuilding",
                           path.name, matrix.schema_hash, expected_schema)
            self.misses += 1
            return None
        if matrix.content_hash() != stored_hash:
            logger.warning("Feature cache %s failed its content hash check; rebuilding", path.name)
            self.misses += 1
            return None
        self.hits += 1
        logger.info("Feature cache hit: %s (%d rows)", path.name, len(matrix))
        return matrix
