"""
Probabilistic forecasts from a median point forecast.

Pipeline: aggregate the level-12 median to all 12 levels, multiply by the
per-level quantile factors, then correct levels 12 and 11 with empirical
sales quantiles over trailing windows. Every emitted cell is sorted so the
9 quantiles are non-decreasing.

Factors are either loaded from CSV (config/quantile_factors.csv ships the
published table) or fitted by minimizing the weighted scaled pinball loss
on one or more validation splits.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from sklearn.isotonic import IsotonicRegression

from errors import MissingSeriesError, ValidationError
from hierarchy import N_LEVELS, HierarchyIndex, aggregate, aggregate_all
from metrics import MEDIAN_POSITION, QUANTILES, pinball_array

logger = logging.getLogger(__name__)

# Configuration
N_QUANTILES = len(QUANTILES)
LOWER = (0, 1, 2, 3)
UPPER = (5, 6, 7, 8)
FACTOR_UPPER_BOUND = 10.0
FACTOR_XATOL = 1e-4
DEFAULT_EXTRA_MULTIPLIERS = (1.0, 1.02, 1.03)
STAT_WINDOWS = {"daily_long": 13 * 28, "daily_short": 28, "weekly_long": 13 * 28, "weekly_short": 3 * 28}
LEVEL12_WEIGHTS = (0.2, 0.7, 0.1)
LEVEL11_WEIGHTS = (0.91, 0.09)
SHORT_WINDOW_WEIGHT = 1.75
STAT_POSITIONS = LOWER + UPPER
STAT_QUANTILES = tuple(QUANTILES[j] for j in STAT_POSITIONS)


@dataclass(frozen=True)
class QuantileFactorTable:
    """Per-level multiplicative factors for the 9 quantiles plus a last-quantile multiplier."""

    factors: np.ndarray
    extra: np.ndarray

    def __post_init__(self):
        factors = np.asarray(self.factors, dtype=float)
        extra = np.asarray(self.extra, dtype=float)
        if factors.shape != (N_LEVELS, N_QUANTILES) or extra.shape != (N_LEVELS,):
            raise ValidationError(f"factor table must be {N_LEVELS}x{N_QUANTILES} plus {N_LEVELS} extras")
        if not np.all(factors[:, MEDIAN_POSITION] == 1.0):
            raise ValidationError("median factor must be exactly 1.0 on every level")
        if (factors < 0).any() or (extra <= 0).any():
            raise ValidationError("factors must be non-negative and extra multipliers positive")
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "extra", extra)

    @classmethod
    def identity(cls) -> "QuantileFactorTable":
        return cls(np.ones((N_LEVELS, N_QUANTILES)), np.ones(N_LEVELS))

    def effective(self) -> np.ndarray:
        """Factors with the extra multiplier folded into the last quantile."""
        out = self.factors.copy()
        out[:, -1] *= self.extra
        return out

    def factor(self, level: int, u: float) -> float:
        return float(self.factors[level - 1, QUANTILES.index(u)])

    def check_monotone(self):
        eff = self.effective()
        bad = np.flatnonzero((np.diff(eff, axis=1) < 0).any(axis=1))
        if len(bad):
            raise ValidationError(f"quantile factors decrease in u on level {int(bad[0]) + 1}")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.factors, columns=[f"{u:g}" for u in QUANTILES])
        frame.insert(0, "level", np.arange(1, N_LEVELS + 1))
        frame["extra"] = self.extra
        return frame

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path: Path) -> "QuantileFactorTable":
        path = Path(path)
        if not path.exists():
            raise ValidationError("factor table not found", path=str(path))
        frame = pd.read_csv(path)
        columns = [c for c in frame.columns if c not in ("level", "extra")]
        try:
            parsed = sorted((float(c), c) for c in columns)
        except ValueError as exc:
            raise ValidationError(f"unexpected factor column: {exc}", path=str(path)) from exc
        if tuple(u for u, _ in parsed) != QUANTILES:
            raise ValidationError(f"factor columns must be the quantile levels {QUANTILES}", path=str(path))
        frame = frame.sort_values("level")
        if frame["level"].tolist() != list(range(1, N_LEVELS + 1)):
            raise ValidationError("factor table needs exactly one row per level 1..12", path=str(path))
        extra = frame["extra"].to_numpy(dtype=float) if "extra" in frame.columns else np.ones(N_LEVELS)
        table = cls(frame[[c for _, c in parsed]].to_numpy(dtype=float), extra)
        table.check_monotone()
        return table


@dataclass(frozen=True)
class QuantileGrid:
    """(n_series, horizon, 9) quantile forecasts for one level."""

    level: int
    series_keys: List[str]
    start_day: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != len(self.series_keys) or values.shape[2] != N_QUANTILES:
            raise ValueError(f"quantile grid shape {values.shape} does not match "
                             f"({len(self.series_keys)}, h, {N_QUANTILES})")
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=2) >= 0))

    def sorted(self) -> "QuantileGrid":
        return QuantileGrid(self.level, self.series_keys, self.start_day, np.sort(self.values, axis=2))


def _median_values(grid) -> Tuple[np.ndarray, List[str], int]:
    return np.asarray(grid.values, dtype=float), list(grid.series_keys), int(grid.start_day)


def apply_factors(medians: Dict[int, object], table: QuantileFactorTable) -> Dict[int, QuantileGrid]:
    """Q(u) = median * factor(level, u); the last quantile also takes the extra multiplier."""
    table.check_monotone()
    missing = [lvl for lvl in range(1, N_LEVELS + 1) if lvl not in medians]
    if missing:
        raise MissingSeriesError(f"median grids missing for levels {missing}")
    eff = table.effective()
    out = {}
    for level in range(1, N_LEVELS + 1):
        values, keys, start = _median_values(medians[level])
        quantiles = values[:, :, None] * eff[level - 1][None, None, :]
        quantiles[:, :, MEDIAN_POSITION] = values
        out[level] = QuantileGrid(level, keys, start, quantiles)
    return out


@dataclass
class FactorProblem:
    """
    Inputs for fitting factors on one validation window.

    Per level: medians and actuals (n_series, horizon), weights and absolute
    scale denominators (n_series,). NaN scales mark degenerate series, which
    get no weight.
    """

    medians: Dict[int, np.ndarray]
    actuals: Dict[int, np.ndarray]
    weights: Dict[int, np.ndarray]
    scales: Dict[int, np.ndarray]

    def __post_init__(self):
        self._coef = {}
        for level in self.medians:
            scale = np.asarray(self.scales[level], dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(np.isnan(scale), 0.0, np.asarray(self.weights[level]) / scale)
            self._coef[level] = coef

    @property
    def levels(self) -> List[int]:
        return sorted(self.medians)

    def slice_loss(self, level: int, position: int, factor: float) -> float:
        """Weighted SPL of one (level, quantile) slice at the given factor."""
        q = factor * self.medians[level]
        loss = pinball_array(self.actuals[level], q, QUANTILES[position]).mean(axis=1)
        return float(np.dot(self._coef[level], loss))

    def wspl(self, table: QuantileFactorTable) -> float:
        eff = table.effective()
        return sum(self.slice_loss(level, j, eff[level - 1, j])
                   for level in self.levels for j in range(N_QUANTILES)) / N_QUANTILES

    def degenerate(self, level: int) -> bool:
        return bool(np.all(self.actuals[level] == 0)) or bool(np.all(self.medians[level] == 0))

    @classmethod
    def from_scorer(cls, scorer, median12, start_day: int) -> "FactorProblem":
        """Build from a HierarchicalScorer and a level-12 median forecast."""
        medians, actuals, weights, scales = {}, {}, {}, {}
        horizon = median12.values.shape[1]
        truth = scorer.actuals(start_day, horizon)
        for level in range(1, N_LEVELS + 1):
            medians[level] = aggregate(median12, scorer.index, level).values
            actuals[level] = aggregate(truth, scorer.index, level)
            weights[level] = scorer.weights.weights[level]
            scales[level] = scorer.scale(level, "absolute")
        return cls(medians, actuals, weights, scales)


def _minimize(objective, bounds: Tuple[float, float]) -> float:
    result = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": FACTOR_XATOL})
    return float(result.x)


def _isotonic_row(row: np.ndarray) -> np.ndarray:
    """Project onto non-decreasing lower factors <= 1 <= non-decreasing upper factors."""
    out = row.copy()
    x = np.arange(len(LOWER))
    out[list(LOWER)] = IsotonicRegression(y_max=1.0).fit_transform(x, row[list(LOWER)])
    out[list(UPPER)] = IsotonicRegression(y_min=1.0).fit_transform(x, row[list(UPPER)])
    out[MEDIAN_POSITION] = 1.0
    return out


def optimize_factors(problems: Union[FactorProblem, Sequence[FactorProblem]],
                     symmetric_levels: Sequence[int] = tuple(range(1, 10)),
                     extra_multipliers: Sequence[float] = DEFAULT_EXTRA_MULTIPLIERS
                     ) -> Tuple[QuantileFactorTable, pd.DataFrame]:
    """
    Fit per-(level, quantile) factors by bounded 1-D minimization of the weighted SPL.

    Levels in ``symmetric_levels`` fit each mirrored pair (u, 1-u) jointly as
    (1 - d, 1 + d). A fitted value is kept only when it beats 1.0; the rows
    are then projected to be monotone and the last-quantile multiplier is
    picked from ``extra_multipliers``. Falls back to the identity table if
    the total loss does not improve.
    """
    problems = [problems] if isinstance(problems, FactorProblem) else list(problems)
    if not problems:
        raise ValidationError("no validation windows to fit quantile factors on")
    levels = sorted(set().union(*(p.levels for p in problems)))

    def loss(level: int, position: int, factor: float) -> float:
        return sum(p.slice_loss(level, position, factor) for p in problems if level in p.medians)

    factors = np.ones((N_LEVELS, N_QUANTILES))
    extra = np.ones(N_LEVELS)
    rows = []
    for level in levels:
        if all(p.degenerate(level) for p in problems if level in p.medians):
            logger.warning("Level %d has all-zero actuals or medians; keeping identity factors", level)
            continue
        row = np.ones(N_QUANTILES)
        if level in symmetric_levels:
            for lo, hi in zip(LOWER, reversed(UPPER)):
                def pair_loss(d, lo=lo, hi=hi):
                    return loss(level, lo, 1.0 - d) + loss(level, hi, 1.0 + d)
                d = _minimize(pair_loss, (0.0, 1.0))
                if pair_loss(d) < pair_loss(0.0):
                    row[lo], row[hi] = 1.0 - d, 1.0 + d
        else:
            for j in LOWER + UPPER:
                bounds = (0.0, 1.0) if j < MEDIAN_POSITION else (1.0, FACTOR_UPPER_BOUND)
                f = _minimize(lambda x, j=j: loss(level, j, x), bounds)
                if loss(level, j, f) < loss(level, j, 1.0):
                    row[j] = f
        row = _isotonic_row(row)
        factors[level - 1] = row

        best = min(extra_multipliers, key=lambda m: (loss(level, N_QUANTILES - 1, row[-1] * m), m))
        extra[level - 1] = best
        for j in range(N_QUANTILES):
            f = row[j] * (best if j == N_QUANTILES - 1 else 1.0)
            rows.append({"level": level, "quantile": QUANTILES[j], "factor": f,
                         "loss": loss(level, j, f), "loss_identity": loss(level, j, 1.0)})

    table = QuantileFactorTable(factors, extra)
    identity = QuantileFactorTable.identity()
    fitted_total = sum(p.wspl(table) for p in problems)
    identity_total = sum(p.wspl(identity) for p in problems)
    if fitted_total > identity_total:
        logger.warning("Fitted factors (%.6f) worse than identity (%.6f); using identity",
                       fitted_total, identity_total)
        table = identity
    logger.info("Quantile factors fitted on %d window(s): WSPL %.6f (identity %.6f)",
                len(problems), min(fitted_total, identity_total), identity_total)
    return table, pd.DataFrame(rows)


@dataclass(frozen=True)
class StatQuantiles:
    """Empirical quantiles (u != 0.5) per series over a trailing window."""

    values: np.ndarray
    window: int
    weekly: bool


def _empirical_quantiles(samples: np.ndarray) -> np.ndarray:
    """(n_series, 8) linear-interpolated quantiles ignoring NaN; all-NaN rows give 0."""
    out = np.zeros((samples.shape[0], len(STAT_QUANTILES)))
    has_data = (~np.isnan(samples)).any(axis=1)
    if has_data.any():
        out[has_data] = np.nanquantile(samples[has_data], STAT_QUANTILES, axis=1, method="linear").T
    return out


def statistical_quantiles(history: np.ndarray, last_day: int, window: int,
                          weekly: bool = False) -> StatQuantiles:
    """
    Quantiles of daily sales (or of 7-day sums divided by 7) over the window
    ending at ``last_day``; the window shrinks with a warning when the
    history is shorter.
    """
    history = np.asarray(history, dtype=float)
    last_day = min(last_day, history.shape[1])
    if window > last_day:
        logger.warning("Statistics window of %d days shrunk to the %d available", window, last_day)
        window = last_day
    if weekly:
        window = (window // 7) * 7
        if window == 0:
            raise ValidationError("weekly statistics need at least 7 days of history")
    samples = history[:, last_day - window:last_day]
    if weekly:
        samples = samples.reshape(samples.shape[0], window // 7, 7)
        # a week with a missing day is skipped
        samples = samples.sum(axis=2) / 7.0
    return StatQuantiles(values=_empirical_quantiles(samples), window=window, weekly=weekly)


def stat_quantile_set(history: np.ndarray, last_day: int) -> Dict[str, StatQuantiles]:
    return {
        "daily_long": statistical_quantiles(history, last_day, STAT_WINDOWS["daily_long"]),
        "daily_short": statistical_quantiles(history, last_day, STAT_WINDOWS["daily_short"]),
        "weekly_long": statistical_quantiles(history, last_day, STAT_WINDOWS["weekly_long"], weekly=True),
        "weekly_short": statistical_quantiles(history, last_day, STAT_WINDOWS["weekly_short"], weekly=True),
    }


def _daily_blend(long: np.ndarray, short: np.ndarray) -> np.ndarray:
    return (long + SHORT_WINDOW_WEIGHT * short) / (1.0 + SHORT_WINDOW_WEIGHT)


def _correct(estimated: QuantileGrid, correction: np.ndarray, weight: float) -> QuantileGrid:
    values = estimated.values.copy()
    for k, j in enumerate(STAT_POSITIONS):
        values[:, :, j] = (1.0 - weight) * values[:, :, j] + weight * correction[:, None, k]
    return QuantileGrid(estimated.level, estimated.series_keys, estimated.start_day,
                        np.sort(values, axis=2))


def correct_level12(estimated: QuantileGrid, stats: Dict[str, StatQuantiles]) -> QuantileGrid:
    """0.2 * estimate + 0.7 * daily stats blend + 0.1 * weekly stats mean; median untouched."""
    missing = [k for k in STAT_WINDOWS if k not in stats]
    if missing:
        raise MissingSeriesError(f"statistical quantiles missing: {missing}")
    w_est, w_daily, w_weekly = LEVEL12_WEIGHTS
    daily = _daily_blend(stats["daily_long"].values, stats["daily_short"].values)
    weekly = (stats["weekly_long"].values + stats["weekly_short"].values) / 2.0
    for name, arr in (("daily", daily), ("weekly", weekly)):
        if arr.shape[0] != len(estimated.series_keys):
            raise MissingSeriesError(f"{name} statistics cover {arr.shape[0]} series, "
                                     f"grid has {len(estimated.series_keys)}")
    values = estimated.values.copy()
    for k, j in enumerate(STAT_POSITIONS):
        values[:, :, j] = (w_est * values[:, :, j] + w_daily * daily[:, None, k]
                           + w_weekly * weekly[:, None, k])
    return QuantileGrid(estimated.level, estimated.series_keys, estimated.start_day,
                        np.sort(values, axis=2))


def correct_level11(estimated: QuantileGrid, long: np.ndarray, short: np.ndarray) -> QuantileGrid:
    """0.91 * estimate + 0.09 * daily stats blend; median untouched."""
    if long is None or short is None:
        raise MissingSeriesError("level-11 statistics missing")
    if long.shape[0] != len(estimated.series_keys) or short.shape[0] != len(estimated.series_keys):
        raise MissingSeriesError("level-11 statistics do not match the grid's series")
    return _correct(estimated, _daily_blend(long, short), LEVEL11_WEIGHTS[1])


def level11_stats(history: np.ndarray, index: HierarchyIndex, last_day: int,
                  strategy: str = "summed-members") -> Tuple[np.ndarray, np.ndarray]:
    """
    Long and short daily statistics for level 11.

    summed-members: sum the member level-12 quantiles.
    direct: quantiles of the aggregated level-11 history.
    """
    long_window, short_window = STAT_WINDOWS["daily_long"], STAT_WINDOWS["daily_short"]
    if strategy == "summed-members":
        long12 = statistical_quantiles(history, last_day, long_window).values
        short12 = statistical_quantiles(history, last_day, short_window).values
        return aggregate(long12, index, 11), aggregate(short12, index, 11)
    if strategy == "direct":
        agg = aggregate(np.nan_to_num(np.asarray(history, dtype=float), nan=0.0), index, 11)
        return (statistical_quantiles(agg, last_day, long_window).values,
                statistical_quantiles(agg, last_day, short_window).values)
    raise ValueError(f"unknown level-11 strategy '{strategy}'")


def probabilistic_forecast(median12, panel, index: HierarchyIndex, table: QuantileFactorTable,
                           correct_11: bool = True, correct_12: bool = True,
                           level11_strategy: str = "summed-members") -> Dict[int, QuantileGrid]:
    """Median -> aggregate -> factors -> level 11/12 corrections."""
    medians = aggregate_all(median12, index)
    grids = apply_factors(medians, table)
    last_day = median12.start_day - 1
    history = np.asarray(panel.history)
    if correct_12:
        grids[12] = correct_level12(grids[12], stat_quantile_set(history, last_day))
    if correct_11:
        long, short = level11_stats(history, index, last_day, level11_strategy)
        grids[11] = correct_level11(grids[11], long, short)
    return {level: grid.sorted() for level, grid in grids.items()}


def assemble_submission(grids: Dict[int, QuantileGrid]) -> pd.DataFrame:
    """One row per (series, quantile) with id '<series>_<u>' and columns F1..Fh."""
    missing = [lvl for lvl in range(1, N_LEVELS + 1) if lvl not in grids]
    if missing:
        raise MissingSeriesError(f"quantile grids missing for levels {missing}")
    frames = []
    for level in range(1, N_LEVELS + 1):
        grid = grids[level]
        if not grid.is_monotone():
            raise ValidationError(f"level {level} quantiles are not monotone in u")
        n_series, horizon, _ = grid.values.shape
        ids = [f"{key}_{u:.3f}" for key in grid.series_keys for u in QUANTILES]
        frame = pd.DataFrame(grid.values.transpose(0, 2, 1).reshape(n_series * N_QUANTILES, horizon),
                             columns=[f"F{i}" for i in range(1, horizon + 1)])
        frame.insert(0, "id", ids)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def read_quantile_submission(path: Path, index: HierarchyIndex) -> Dict[int, np.ndarray]:
    """Parse a quantile submission into per-level (n_series, h, 9) arrays ordered like the hierarchy."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise ValidationError("quantile file is empty", path=str(path)) from exc
    if frame.empty or "id" not in frame.columns:
        raise ValidationError("quantile file has no rows or no id column", path=str(path))
    horizon_cols = [c for c in frame.columns if c.startswith("F")]
    parts = frame["id"].astype(str).str.rsplit("_", n=1, expand=True)
    frame = frame.assign(series=parts[0], u=parts[1].astype(float))
    by_key = {(s, round(u, 3)): i for i, (s, u) in enumerate(zip(frame["series"], frame["u"]))}
    values = frame[horizon_cols].to_numpy(dtype=float)

    out = {}
    for level in range(1, N_LEVELS + 1):
        keys = index.levels[level].keys
        arr = np.empty((len(keys), len(horizon_cols), N_QUANTILES))
        for i, key in enumerate(keys):
            for j, u in enumerate(QUANTILES):
                row = by_key.get((key, round(u, 3)))
                if row is None:
                    raise MissingSeriesError(f"quantile file lacks {key} at u={u}")
                arr[i, :, j] = values[row]
        out[level] = arr
    return out
