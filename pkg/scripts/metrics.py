"""
Competition metrics: RMSSE, WRMSSE, pinball loss, SPL and WSPL.

The scalar functions follow the metric definitions term by term and double
as the reference implementation. HierarchicalScorer evaluates whole
hierarchies at once (vectorized per level) and produces a ScoreReport with a
per-series, per-level and total breakdown.

Scale denominators trim leading zeros from the history (products not yet on
sale) unless ``trim_leading_zeros=False``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DegenerateSeriesError, MissingSeriesError
from hierarchy import N_LEVELS, HierarchyIndex, WeightTable, aggregate, compute_weights

logger = logging.getLogger(__name__)

# Configuration
QUANTILES = (0.005, 0.025, 0.165, 0.25, 0.5, 0.75, 0.835, 0.975, 0.995)
MEDIAN_POSITION = 4


def trim_leading_zeros(hist: Sequence[float]) -> np.ndarray:
    y = np.asarray(hist, dtype=float)
    nonzero = np.flatnonzero(y != 0)
    return y[nonzero[0]:] if len(nonzero) else y[:0]


def scale_denominator(hist: Sequence[float], kind: str = "squared",
                      trim_leading_zeros_: bool = True) -> float:
    """
    Mean squared (or absolute) first difference of the history.

    Raises DegenerateSeriesError when fewer than two observations remain or
    the history is constant.
    """
    y = trim_leading_zeros(hist) if trim_leading_zeros_ else np.asarray(hist, dtype=float)
    n = len(y)
    if n < 2:
        raise DegenerateSeriesError(f"history has {n} observation(s) after trimming; need >= 2")
    diffs = np.diff(y)
    if kind == "squared":
        total = float(np.sum(diffs * diffs))
    elif kind == "absolute":
        total = float(np.sum(np.abs(diffs)))
    else:
        raise ValueError(f"unknown scale kind '{kind}'")
    if total == 0.0:
        raise DegenerateSeriesError("constant history: scale denominator is zero")
    return total / (n - 1)


def _check_pair(actual: Sequence[float], forecast: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    if a.shape != f.shape or a.ndim != 1 or len(a) < 1:
        raise ValueError(f"actual and forecast must be equal-length 1-D arrays, got {a.shape} / {f.shape}")
    return a, f


def rmsse(hist: Sequence[float], actual: Sequence[float], forecast: Sequence[float],
          trim_leading_zeros_: bool = True) -> float:
    a, f = _check_pair(actual, forecast)
    denom = scale_denominator(hist, "squared", trim_leading_zeros_)
    err = a - f
    return float(np.sqrt(np.mean(err * err) / denom))


def wrmsse(rmsse_values: Mapping[Tuple[int, str], float], weights: WeightTable) -> float:
    """Weighted sum of per-series RMSSE over all 12 levels."""
    total = 0.0
    for key, w in weights.as_dict().items():
        if key not in rmsse_values:
            raise MissingSeriesError(f"no RMSSE value for level {key[0]} series {key[1]}")
        total += w * rmsse_values[key]
    return total


def pinball(actual: float, q_forecast: float, u: float) -> float:
    if not 0.0 < u < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {u}")
    if q_forecast <= actual:
        return u * (actual - q_forecast)
    return (1.0 - u) * (q_forecast - actual)


def pinball_array(actual: np.ndarray, q_forecast: np.ndarray, u: float) -> np.ndarray:
    diff = np.asarray(actual, dtype=float) - np.asarray(q_forecast, dtype=float)
    return np.where(diff >= 0, u * diff, (u - 1.0) * diff)


def spl(hist: Sequence[float], actual: Sequence[float], q_forecast: Sequence[float], u: float,
        trim_leading_zeros_: bool = True) -> float:
    a, q = _check_pair(actual, q_forecast)
    denom = scale_denominator(hist, "absolute", trim_leading_zeros_)
    return float(np.mean(pinball_array(a, q, u)) / denom)


def wspl(spl_values: Mapping[Tuple[int, str], Sequence[float]], weights: WeightTable) -> float:
    """Weighted sum over series of the mean SPL across the 9 quantile levels."""
    total = 0.0
    for key, w in weights.as_dict().items():
        if key not in spl_values:
            raise MissingSeriesError(f"no SPL values for level {key[0]} series {key[1]}")
        values = list(spl_values[key])
        if len(values) != len(QUANTILES) or any(v is None for v in values):
            raise MissingSeriesError(
                f"level {key[0]} series {key[1]}: expected {len(QUANTILES)} quantile SPLs, got {len(values)}")
        total += w * (sum(values) / len(QUANTILES))
    return total


def scale_denominators(histories: np.ndarray, kind: str = "squared",
                       trim_leading_zeros_: bool = True) -> np.ndarray:
    """
    Vectorized scale_denominator over the rows of a 2-D history array.

    Degenerate rows come back as NaN instead of raising.
    """
    y = np.asarray(histories, dtype=float)
    diffs = np.diff(y, axis=1)
    diffs = diffs * diffs if kind == "squared" else np.abs(diffs)
    if trim_leading_zeros_:
        started = np.maximum.accumulate(y[:, :-1] != 0, axis=1)
        diffs = np.where(started, diffs, 0.0)
        n_obs = y.shape[1] - np.where(started.any(axis=1), started.argmax(axis=1), y.shape[1])
    else:
        n_obs = np.full(y.shape[0], y.shape[1])
    totals = diffs.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scales = totals / (n_obs - 1)
    scales[(n_obs < 2) | (totals == 0)] = np.nan
    return scales


@dataclass
class ScoreReport:
    """Per-series scores plus per-level and total aggregates."""

    metric: str
    series: pd.DataFrame
    total: float
    excluded: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def per_level(self) -> pd.DataFrame:
        """Level score on a per-level scale (level weights sum to 1)."""
        contrib = self.series.assign(contribution=self.series["weight"] * self.series["value"])
        frame = contrib.groupby("level", sort=True)["contribution"].sum().reset_index()
        frame["score"] = frame["contribution"] * N_LEVELS
        return frame[["level", "score", "contribution"]]

    def to_frame(self) -> pd.DataFrame:
        rows = self.series[["level", "series_id", "value"]].assign(metric=self.metric)
        levels = self.per_level
        level_rows = pd.DataFrame({
            "level": levels["level"],
            "series_id": "LEVEL",
            "metric": self.metric.upper(),
            "value": levels["score"],
        })
        total_row = pd.DataFrame({"level": [0], "series_id": ["TOTAL"],
                                  "metric": [f"W{self.metric.upper()}"], "value": [self.total]})
        return pd.concat([rows[["level", "series_id", "metric", "value"]], level_rows, total_row],
                         ignore_index=True)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


class HierarchicalScorer:
    """
    Scores level-12 forecasts against the panel over a 28-day window.

    Histories end at ``last_train_day``; weights come from the 28 days ending
    there; scale denominators use the full history up to that day. Series
    with degenerate histories are excluded (weight 0) with a warning.
    """

    def __init__(self, panel, index: HierarchyIndex, last_train_day: int,
                 trim_leading_zeros_: bool = True, weights: Optional[WeightTable] = None):
        self.panel = panel
        self.index = index
        self.last_train_day = last_train_day
        self.trim = trim_leading_zeros_
        self.weights = weights if weights is not None else compute_weights(panel, index, last_train_day)

        level12 = panel.sales_matrix()
        self._sales = level12
        history = level12[:, :last_train_day]
        self._scales_sq: Dict[int, np.ndarray] = {}
        self._scales_abs: Dict[int, np.ndarray] = {}
        for level in range(1, N_LEVELS + 1):
            agg = aggregate(history, index, level)
            self._scales_sq[level] = scale_denominators(agg, "squared", self.trim)
            self._scales_abs[level] = scale_denominators(agg, "absolute", self.trim)

    def actuals(self, start_day: int, horizon: int) -> np.ndarray:
        end = start_day + horizon - 1
        if end > self.panel.n_days:
            raise MissingSeriesError(f"truth needs days up to d_{end}; panel ends at d_{self.panel.n_days}")
        return self._sales[:, start_day - 1:end]

    def _excluded(self, scales: Dict[int, np.ndarray]) -> List[Tuple[int, str]]:
        out = []
        for level in range(1, N_LEVELS + 1):
            bad = np.flatnonzero(np.isnan(scales[level]))
            out.extend((level, self.index.levels[level].keys[i]) for i in bad)
        if out:
            logger.warning("%d degenerate series excluded from scoring (weight 0)", len(out))
        return out

    def score_point(self, forecast, start_day: int) -> ScoreReport:
        """RMSSE of every hierarchy series and the WRMSSE of a level-12 forecast."""
        values = aggregate(forecast, self.index, 12)
        values = values if isinstance(values, np.ndarray) else values.values
        actual = self.actuals(start_day, values.shape[1])

        frames = []
        for level in range(1, N_LEVELS + 1):
            a = aggregate(actual, self.index, level)
            f = aggregate(values, self.index, level)
            err = a - f
            scores = np.sqrt(np.mean(err * err, axis=1) / self._scales_sq[level])
            frames.append(self._level_frame(level, scores))
        return self._report("rmsse", frames, self._excluded(self._scales_sq))

    def score_quantiles(self, quantile_values: Dict[int, np.ndarray], start_day: int) -> ScoreReport:
        """
        Mean SPL over the 9 quantiles per series and the WSPL.

        ``quantile_values[level]`` is an (n_series, horizon, 9) array ordered like
        the hierarchy level keys.
        """
        frames = []
        horizon = None
        for level in range(1, N_LEVELS + 1):
            if level not in quantile_values:
                raise MissingSeriesError(f"quantile forecasts for level {level} missing")
            q = np.asarray(quantile_values[level], dtype=float)
            if q.shape[-1] != len(QUANTILES):
                raise MissingSeriesError(f"level {level}: expected {len(QUANTILES)} quantiles, got {q.shape[-1]}")
            horizon = q.shape[1]
            actual = aggregate(self.actuals(start_day, horizon), self.index, level)
            losses = np.stack([pinball_array(actual, q[:, :, j], u).mean(axis=1)
                               for j, u in enumerate(QUANTILES)], axis=1)
            scores = losses.mean(axis=1) / self._scales_abs[level]
            frames.append(self._level_frame(level, scores))
        return self._report("spl", frames, self._excluded(self._scales_abs))

    def spl_by_quantile(self, level: int, q_values: np.ndarray, start_day: int) -> np.ndarray:
        """(n_series, 9) SPL matrix for one level; NaN rows for degenerate series."""
        q = np.asarray(q_values, dtype=float)
        actual = aggregate(self.actuals(start_day, q.shape[1]), self.index, level)
        losses = np.stack([pinball_array(actual, q[:, :, j], u).mean(axis=1)
                           for j, u in enumerate(QUANTILES)], axis=1)
        return losses / self._scales_abs[level][:, None]

    def scale(self, level: int, kind: str = "absolute") -> np.ndarray:
        return (self._scales_abs if kind == "absolute" else self._scales_sq)[level]

    def _level_frame(self, level: int, scores: np.ndarray) -> pd.DataFrame:
        return pd.DataFrame({
            "level": level,
            "series_id": self.index.levels[level].keys,
            "value": scores,
            "weight": self.weights.weights[level],
        })

    def _report(self, metric: str, frames: List[pd.DataFrame], excluded) -> ScoreReport:
        series = pd.concat(frames, ignore_index=True)
        valid = series["value"].notna()
        # serial reduction in canonical order keeps totals bit-reproducible
        total = 0.0
        for w, v in zip(series.loc[valid, "weight"], series.loc[valid, "value"]):
            total += w * v
        series = series.assign(weight=np.where(valid, series["weight"], 0.0),
                               value=series["value"].fillna(0.0))
        return ScoreReport(metric=metric, series=series, total=float(total), excluded=excluded)
